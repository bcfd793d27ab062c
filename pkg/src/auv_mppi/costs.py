"""Waypoint cost (weighted L2 norm with a quaternion angle term) and cylinder obstacles."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dynamics import VehicleState
from .errors import ConfigError
from .lie import Pose, UnitQuaternion, angle_between

# position (3), orientation angle (1), body velocity (6)
PAPER_Q = (10.0, 10.0, 10.0, 100.0, 10.0, 10.0, 10.0, 10.0, 10.0, 10.0)


@dataclass(frozen=True)
class GoalSpec:
    pose: Pose = field(default_factory=Pose)
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(6))

    def __post_init__(self):
        v = np.array(self.velocity, dtype=float).reshape(6)
        v.flags.writeable = False
        object.__setattr__(self, "velocity", v)

    @classmethod
    def at(cls, x: float, y: float, z: float, yaw: float = 0.0) -> GoalSpec:
        """Goal from a position and heading, zero desired velocity."""
        return cls(Pose(np.array([x, y, z]), UnitQuaternion.from_yaw(yaw)))


@dataclass(frozen=True)
class CostWeights:
    q: np.ndarray = field(default_factory=lambda: np.array(PAPER_Q))

    def __post_init__(self):
        q = np.array(self.q, dtype=float).reshape(-1)
        if q.shape != (10,):
            raise ConfigError(f"cost weights need 10 entries, got {q.size}")
        if np.any(q < 0) or not np.all(np.isfinite(q)):
            raise ConfigError("cost weights must be finite and non-negative")
        q.flags.writeable = False
        object.__setattr__(self, "q", q)


@dataclass(frozen=True)
class CylinderObstacle:
    """Vertical (world z) cylinder."""

    center: np.ndarray
    radius: float
    half_height: float

    def __post_init__(self):
        c = np.array(self.center, dtype=float).reshape(3)
        c.flags.writeable = False
        object.__setattr__(self, "center", c)
        if not (self.radius > 0 and self.half_height > 0):
            raise ConfigError("cylinder radius and half_height must be positive")


def weighted_error_norm(pos, quat, nu, goal: GoalSpec, q, squared: bool = False):
    """Batched ||x - x_des||_Q over arrays with a leading sample axis."""
    ep = pos - goal.pose.position
    ang = angle_between(quat, goal.pose.orientation.as_array())
    ev = nu - goal.velocity
    s = (ep * ep) @ q[:3] + q[3] * ang * ang + (ev * ev) @ q[4:]
    return s if squared else np.sqrt(s)


def step_cost(x: VehicleState, goal: GoalSpec, weights: CostWeights, squared: bool = False) -> float:
    """sqrt(e^T Q e) with e = (position error, orientation angle error, velocity error)."""
    return float(weighted_error_norm(x.pose.position[None], x.pose.orientation.as_array()[None],
                                     x.velocity[None], goal, weights.q, squared)[0])


# the final state is scored with the same function
terminal_cost = step_cost


def collision_mask(pos, obstacles: Sequence[CylinderObstacle], margin: float):
    """Boolean mask over the leading axes of pos: point within any inflated cylinder."""
    pos = np.asarray(pos, dtype=float)
    hit = np.zeros(pos.shape[:-1], dtype=bool)
    for ob in obstacles:
        d = pos - ob.center
        r = ob.radius + margin
        hit |= (d[..., 0] ** 2 + d[..., 1] ** 2 <= r * r) & (np.abs(d[..., 2]) <= ob.half_height + margin)
    return hit


def check_collision(x: VehicleState, obstacles: Sequence[CylinderObstacle], margin: float = 1.0) -> bool:
    if margin < 0:
        raise ValueError("margin must be non-negative")
    return bool(collision_mask(x.pose.position, obstacles, margin))


@dataclass(frozen=True)
class WaypointCost:
    """Step/terminal cost and collision test used inside MPPI rollouts."""

    goal: GoalSpec
    weights: CostWeights = field(default_factory=CostWeights)
    obstacles: tuple = ()
    margin: float = 1.0
    squared: bool = False

    def __post_init__(self):
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        if self.margin < 0:
            raise ConfigError("collision margin must be non-negative")

    def step(self, pos, quat, nu):
        return weighted_error_norm(pos, quat, nu, self.goal, self.weights.q, self.squared)

    def terminal(self, pos, quat, nu):
        return self.step(pos, quat, nu)

    def collides(self, pos):
        if not self.obstacles:
            return np.zeros(pos.shape[:-1], dtype=bool)
        return collision_mask(pos, self.obstacles, self.margin)
