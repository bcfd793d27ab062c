"""PID and cascade-PID baselines acting on 6-DOF body-frame pose errors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .costs import GoalSpec
from .dynamics import ThrusterAllocation, VehicleState
from .errors import ConfigError
from .lie import quat_log, quat_mul, quat_conj, quat_rotate_inverse

DEFAULT_INTEGRAL_LIMIT = 500.0


def _vec6(v, name):
    v = np.array(np.broadcast_to(np.asarray(v, dtype=float), (6,)))
    v.flags.writeable = False
    return v


@dataclass(frozen=True)
class PidGains:
    kp: np.ndarray
    ki: np.ndarray
    kd: np.ndarray
    integral_limit: np.ndarray = field(default_factory=lambda: np.full(6, DEFAULT_INTEGRAL_LIMIT))

    def __post_init__(self):
        for name in ("kp", "ki", "kd", "integral_limit"):
            v = _vec6(getattr(self, name), name)
            object.__setattr__(self, name, v)
            if np.any(v < 0):
                raise ConfigError(f"PID {name} must be non-negative")
        if np.any(self.integral_limit <= 0):
            raise ConfigError("PID integral_limit must be positive")


@dataclass(frozen=True)
class CascadeGains:
    position: PidGains
    velocity: PidGains


PAPER_PID = PidGains(kp=[250, 250, 250, 800, 800, 800],
                     ki=[100, 100, 100, 300, 300, 300],
                     kd=[1950, 1950, 1950, 1000, 1000, 1000])

PAPER_CASCADE = CascadeGains(
    position=PidGains(kp=[10, 10, 10, 35, 35, 35], ki=[1.5, 1.5, 1.5, 10, 10, 10], kd=[35, 35, 35, 25, 25, 25]),
    velocity=PidGains(kp=[30, 30, 30, 50, 50, 50], ki=[15, 15, 15, 40, 40, 40], kd=[25, 25, 25, 30, 30, 30]),
)


def pose_error(x: VehicleState, goal: GoalSpec) -> np.ndarray:
    """Body-frame error: R^T (p_des - p) and the rotation vector of q^-1 q_des."""
    q = x.pose.orientation.as_array()
    dp = quat_rotate_inverse(q, goal.pose.position - x.pose.position)
    rel = quat_mul(quat_conj(q), goal.pose.orientation.as_array())
    if rel[0] < 0:
        rel = -rel
    return np.concatenate((dp, quat_log(rel)))


class Pid:
    """Diagonal PID with clamped integrator and first-difference derivative."""

    def __init__(self, gains: PidGains):
        self.gains = gains
        self.reset()

    def reset(self):
        self.integral = np.zeros(6)
        self.prev_error = None

    def step(self, error, dt: float) -> np.ndarray:
        if not dt > 0:
            raise ValueError("dt must be positive")
        error = np.asarray(error, dtype=float)
        g = self.gains
        self.integral = np.clip(self.integral + error * dt, -g.integral_limit, g.integral_limit)
        # no derivative kick on the first call
        prev = error if self.prev_error is None else self.prev_error
        derivative = (error - prev) / dt
        self.prev_error = error.copy()
        return g.kp * error + g.ki * self.integral + g.kd * derivative


def pid_step(pid: Pid, error, dt: float) -> np.ndarray:
    return pid.step(error, dt)


class CascadePid:
    """Outer position loop producing a velocity reference for an inner velocity loop."""

    def __init__(self, gains: CascadeGains):
        self.gains = gains
        self.outer = Pid(gains.position)
        self.inner = Pid(gains.velocity)

    def reset(self):
        self.outer.reset()
        self.inner.reset()

    def step(self, x: VehicleState, goal: GoalSpec, dt: float) -> np.ndarray:
        v_ref = self.outer.step(pose_error(x, goal), dt)
        return self.inner.step(v_ref - x.velocity, dt)


def cascade_step(controller: CascadePid, x: VehicleState, goal: GoalSpec, dt: float) -> np.ndarray:
    return controller.step(x, goal, dt)


class WrenchController:
    """Adapts a wrench-producing PID to the thruster-command interface used by the simulator."""

    def __init__(self, kind: str, allocation: ThrusterAllocation, goal: GoalSpec, dt: float,
                 gains: PidGains | CascadeGains | None = None):
        if kind == "pid":
            self.law = Pid(gains or PAPER_PID)
        elif kind == "cascade":
            self.law = CascadePid(gains or PAPER_CASCADE)
        else:
            raise ConfigError(f"unknown baseline {kind!r}")
        self.kind = kind
        self.allocation = allocation
        self.goal = goal
        self.dt = dt

    def reset(self):
        self.law.reset()

    def control_step(self, state: VehicleState):
        if self.kind == "pid":
            wrench = self.law.step(pose_error(state, self.goal), self.dt)
        else:
            wrench = self.law.step(state, self.goal, self.dt)
        return self.allocation.clamp(self.allocation.pinv @ wrench), {}
