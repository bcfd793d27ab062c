"""Closed-loop episode runner, buoyancy variants, trajectory logs and metrics."""

from __future__ import annotations

import csv
import math
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .costs import CylinderObstacle, GoalSpec, collision_mask
from .dynamics import VehicleModel, VehicleState, allocate, step_batch
from .errors import AllSamplesRejected, ConfigError, EmptyLog, PlantDiverged
from .lie import Pose, UnitQuaternion
from .mppi import DIAGNOSTIC_COLUMNS

VARIANTS = ("neutral", "negative", "positive")
NEGATIVE_EXTRA_MASS = 100.0  # kg
POSITIVE_NET_BUOYANCY = 250.0  # N
SETTLING_FRACTION = 0.02
STEADY_STATE_FRACTION = 0.1
STATE_COLUMNS = ("x", "y", "z", "qw", "qx", "qy", "qz", "u", "v", "w", "p", "q", "r")
METRIC_AXES = ("x", "y", "z", "yaw")


@dataclass(frozen=True)
class Scenario:
    goal: GoalSpec
    initial: VehicleState = field(default_factory=VehicleState)
    buoyancy_variant: str = "neutral"
    obstacles: tuple = ()
    duration: float = 30.0
    control_dt: float = 0.1
    plant_dt: float = 0.02
    disturbance: np.ndarray | None = None
    collision_margin: float = 1.0
    goal_tolerance: float = 1.0
    name: str = "scenario"

    def __post_init__(self):
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        if self.buoyancy_variant not in VARIANTS:
            raise ConfigError(f"buoyancy_variant must be one of {VARIANTS}, got {self.buoyancy_variant!r}")
        if not self.duration > 0:
            raise ConfigError("duration must be positive")
        if not 0 < self.plant_dt <= self.control_dt:
            raise ConfigError("plant_dt must be positive and no larger than control_dt")
        ratio = self.control_dt / self.plant_dt
        if abs(ratio - round(ratio)) > 1e-9 * ratio:
            raise ConfigError("control_dt must be an integer multiple of plant_dt")
        if self.disturbance is not None:
            d = np.array(self.disturbance, dtype=float).reshape(6)
            d.flags.writeable = False
            object.__setattr__(self, "disturbance", d)

    @property
    def substeps(self) -> int:
        return int(round(self.control_dt / self.plant_dt))

    @property
    def num_steps(self) -> int:
        return int(round(self.duration / self.control_dt))


def apply_variant(model: VehicleModel, variant: str) -> VehicleModel:
    """Plant parameters for a buoyancy scenario.

    negative: +100 kg rigid-body mass (mass matrix and weight), buoyancy untouched.
    positive: buoyancy raised until the net upward force at level attitude is 250 N.
    """
    if variant == "neutral":
        return model
    if variant == "negative":
        return model.with_mass(model.rigid.mass + NEGATIVE_EXTRA_MASS)
    if variant == "positive":
        return model.with_buoyancy(model.weight + POSITIVE_NET_BUOYANCY)
    raise ConfigError(f"unknown buoyancy variant {variant!r}")


@dataclass
class TrajectoryLog:
    """One row per control step: time, state at that time, command applied over the next interval."""

    times: np.ndarray
    states: np.ndarray
    commands: np.ndarray
    diagnostics: dict
    final_state: VehicleState | None = None
    status: str = "ok"

    def __len__(self):
        return len(self.times)

    @property
    def positions(self):
        return self.states[:, :3]

    def header(self):
        thrust = [f"thrust_{i}" for i in range(self.commands.shape[1])]
        return ["time", *STATE_COLUMNS, *thrust, *DIAGNOSTIC_COLUMNS]

    def rows(self):
        diag = np.column_stack([self.diagnostics.get(c, np.full(len(self), np.nan)) for c in DIAGNOSTIC_COLUMNS])
        return np.column_stack((self.times, self.states, self.commands, diag))

    def to_csv(self, path):
        write_csv_atomic(path, self.header(), self.rows())

    @classmethod
    def from_csv(cls, path) -> TrajectoryLog:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            data = np.array([[float(v) for v in row] for row in reader], dtype=float).reshape(-1, len(header))
        n_thrust = sum(h.startswith("thrust_") for h in header)
        diag = {c: data[:, 14 + n_thrust + i] for i, c in enumerate(DIAGNOSTIC_COLUMNS)}
        return cls(data[:, 0], data[:, 1:14], data[:, 14:14 + n_thrust], diag)


def write_csv_atomic(path, header, rows):
    path = os.fspath(path)
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=".csv")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in rows:
                w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def run_episode(controller, scenario: Scenario, plant: VehicleModel) -> TrajectoryLog:
    """Simulate ``scenario`` with ``controller`` in the loop.

    The controller is stepped every control_dt (zero-order hold); the plant
    is integrated with RK2 at plant_dt. ``plant`` should already carry the
    buoyancy variant; the controller keeps whatever model it was built with.
    Raises PlantDiverged (with the partial log attached) on a non-finite state.
    """
    n = scenario.num_steps
    n_thr = plant.allocation.n
    times = np.zeros(n)
    states = np.zeros((n, 13))
    commands = np.zeros((n, n_thr))
    diags = {c: np.full(n, np.nan) for c in DIAGNOSTIC_COLUMNS}
    disturbance = scenario.disturbance

    pos = scenario.initial.pose.position[None].copy()
    quat = scenario.initial.pose.orientation.as_array()[None]
    nu = scenario.initial.velocity[None].copy()
    state = scenario.initial
    controller.reset()
    for i in range(n):
        times[i] = i * scenario.control_dt
        states[i] = state.as_array()
        try:
            u, diag = controller.control_step(state)
        except AllSamplesRejected:
            u, diag = controller.fallback_step()
        u = plant.allocation.clamp(u)
        commands[i] = u
        for c in DIAGNOSTIC_COLUMNS:
            if c in diag:
                diags[c][i] = diag[c]
        tau = allocate(plant.allocation, u)
        if disturbance is not None:
            tau = tau + disturbance
        for _ in range(scenario.substeps):
            pos, quat, nu = step_batch(plant, pos, quat, nu, tau[None], scenario.plant_dt)
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(quat)) and np.all(np.isfinite(nu))):
            log = TrajectoryLog(times[:i + 1], states[:i + 1], commands[:i + 1],
                                {c: v[:i + 1] for c, v in diags.items()}, None, "diverged")
            raise PlantDiverged(f"plant state became non-finite at t={times[i] + scenario.control_dt:.2f}s", log)
        state = VehicleState(Pose(pos[0], UnitQuaternion.from_array(quat[0])), nu[0])
    return TrajectoryLog(times, states, commands, diags, state)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _yaw(q):
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.arctan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z))


def axis_errors(log: TrajectoryLog, goal: GoalSpec) -> np.ndarray:
    """World-frame x, y, z errors and wrapped yaw error per row, shape (N, 4)."""
    ep = log.states[:, :3] - goal.pose.position
    yaw_goal = goal.pose.orientation.yaw()
    eyaw = np.angle(np.exp(1j * (_yaw(log.states[:, 3:7]) - yaw_goal)))
    return np.column_stack((ep, eyaw))


@dataclass
class Metrics:
    steady_state_error: dict
    max_abs_error: dict
    overshoot_pct: float
    settling_time: float
    collision_count: int
    goal_reached: bool
    final_position_error: float

    @property
    def success(self) -> bool:
        return self.goal_reached and self.collision_count == 0

    def as_dict(self) -> dict:
        out = {f"ss_{a}": self.steady_state_error[a] for a in METRIC_AXES}
        out.update({f"max_{a}": self.max_abs_error[a] for a in METRIC_AXES})
        out.update(overshoot_pct=self.overshoot_pct, settling_time=self.settling_time,
                   collision_count=self.collision_count, goal_reached=int(self.goal_reached),
                   final_position_error=self.final_position_error)
        return out


METRIC_COLUMNS = tuple(Metrics({a: 0 for a in METRIC_AXES}, {a: 0 for a in METRIC_AXES}, 0, 0, 0, False, 0)
                       .as_dict())


def compute_metrics(log: TrajectoryLog, scenario: Scenario) -> Metrics:
    """Steady-state error over the final 10% of rows, overshoot, 2% settling time, collisions."""
    if len(log) == 0:
        raise EmptyLog("trajectory log has no rows")
    goal = scenario.goal
    err = np.abs(axis_errors(log, goal))
    tail = max(1, int(math.ceil(STEADY_STATE_FRACTION * len(log))))
    ss = {a: float(err[-tail:, i].mean()) for i, a in enumerate(METRIC_AXES)}
    mx = {a: float(err[:, i].max()) for i, a in enumerate(METRIC_AXES)}

    p0 = log.states[0, :3]
    delta = goal.pose.position - p0
    step_size = float(np.linalg.norm(delta))
    dist = np.linalg.norm(log.states[:, :3] - goal.pose.position, axis=1)
    if step_size > 0:
        progress = (log.states[:, :3] - p0) @ (delta / step_size)
        overshoot = max(0.0, float(progress.max()) - step_size) / step_size * 100.0
    else:
        overshoot = 0.0
    threshold = SETTLING_FRACTION * step_size
    outside = np.nonzero(dist > threshold)[0]
    if outside.size == 0:
        settling = 0.0
    elif outside[-1] == len(log) - 1:
        settling = math.inf
    else:
        settling = float(log.times[outside[-1] + 1] - log.times[0])

    collisions = int(collision_mask(log.states[:, :3], scenario.obstacles, scenario.collision_margin).sum())
    final = log.final_state.pose.position if log.final_state is not None else log.states[-1, :3]
    final_err = float(np.linalg.norm(final - goal.pose.position))
    return Metrics(ss, mx, overshoot, settling, collisions, final_err <= scenario.goal_tolerance, final_err)


def cruise_mask(log: TrajectoryLog, scenario: Scenario, low: float = 0.1, high: float = 0.9) -> np.ndarray:
    """Rows where progress along the start->goal axis is between low and high of the step."""
    p0 = log.states[0, :3]
    delta = scenario.goal.pose.position - p0
    length = np.linalg.norm(delta)
    if length == 0:
        return np.zeros(len(log), dtype=bool)
    frac = (log.states[:, :3] - p0) @ delta / length ** 2
    return (frac >= low) & (frac <= high)
