"""Fossen-model vehicle dynamics, RK2 predictor and thruster allocation.

Equation of motion in the body frame::

    M_tot nu_dot + C(nu) nu + D(nu) nu + g(m) = tau_C + tau_N

Body frame: x forward, y left, z up (the world frame is North-West-Up).
``restoring`` returns the gravity/buoyancy wrench acting on the vehicle,
i.e. ``-g(m)``.

Single-state functions take ``VehicleState``/``Pose`` values; the ``*_batch``
variants work on (K, ...) arrays and back the MPPI rollouts.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from .errors import ClampedInput, ConfigError, DimensionMismatch, SingularMass
from .lie import Pose, UnitQuaternion, cross, oplus_arrays, quat_mul, quat_exp, quat_normalize, skew

GRAVITY = 9.81
MAX_CONDITION = 1e8
MAX_DT = 0.2


def _frozen(a, shape, name):
    a = np.array(a, dtype=float)
    if a.size == int(np.prod(shape)) and a.shape != shape:
        a = a.reshape(shape)
    if a.shape != shape:
        raise ConfigError(f"{name}: expected shape {shape}, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ConfigError(f"{name}: entries must be finite")
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class RigidBodyParams:
    mass: float
    inertia: np.ndarray  # about the body origin
    cog: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not self.mass > 0:
            raise ConfigError("mass must be positive")
        inertia = _frozen(self.inertia, (3, 3), "inertia")
        if not np.allclose(inertia, inertia.T, atol=1e-9 * max(1.0, np.abs(inertia).max())):
            raise ConfigError("inertia must be symmetric")
        if np.linalg.eigvalsh(inertia).min() <= 0:
            raise ConfigError("inertia must be positive definite")
        object.__setattr__(self, "mass", float(self.mass))
        object.__setattr__(self, "inertia", inertia)
        object.__setattr__(self, "cog", _frozen(self.cog, (3,), "cog"))

    def mass_matrix(self) -> np.ndarray:
        m = self.mass
        s = skew(self.cog)
        out = np.zeros((6, 6))
        out[:3, :3] = m * np.eye(3)
        out[:3, 3:] = -m * s
        out[3:, :3] = m * s
        out[3:, 3:] = self.inertia
        return out


@dataclass(frozen=True)
class HydroParams:
    added_mass: np.ndarray
    linear_damping: np.ndarray
    quadratic_damping: np.ndarray
    buoyancy_force: float
    cob: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        ma = _frozen(self.added_mass, (6, 6), "added_mass")
        if not np.allclose(ma, ma.T, atol=1e-9 * max(1.0, np.abs(ma).max())):
            raise ConfigError("added_mass must be symmetric")
        if np.linalg.eigvalsh(ma).min() < -1e-9 * max(1.0, np.abs(ma).max()):
            raise ConfigError("added_mass must be positive semidefinite")
        dq = _frozen(self.quadratic_damping, (6,), "quadratic_damping")
        if np.any(dq < 0):
            raise ConfigError("quadratic_damping coefficients must be non-negative")
        if not self.buoyancy_force >= 0:
            raise ConfigError("buoyancy_force must be non-negative")
        object.__setattr__(self, "added_mass", ma)
        object.__setattr__(self, "linear_damping", _frozen(self.linear_damping, (6, 6), "linear_damping"))
        object.__setattr__(self, "quadratic_damping", dq)
        object.__setattr__(self, "buoyancy_force", float(self.buoyancy_force))
        object.__setattr__(self, "cob", _frozen(self.cob, (3,), "cob"))


@dataclass(frozen=True)
class ThrusterAllocation:
    """Maps n thruster forces [N] to a body wrench through a 6 x n matrix."""

    tam: np.ndarray
    max_thrust: float

    def __post_init__(self):
        tam = np.array(self.tam, dtype=float)
        if tam.ndim != 2 or tam.shape[0] != 6:
            raise ConfigError(f"tam must be 6 x n, got shape {tam.shape}")
        if tam.shape[1] < 6 or np.linalg.matrix_rank(tam) < 6:
            raise ConfigError("tam must have rank 6 (fully actuated vehicle)")
        if not self.max_thrust > 0:
            raise ConfigError("max_thrust must be positive")
        tam.flags.writeable = False
        object.__setattr__(self, "tam", tam)
        object.__setattr__(self, "max_thrust", float(self.max_thrust))

    @classmethod
    def identity(cls, max_thrust: float) -> ThrusterAllocation:
        """Pass-through mode: commands are the body wrench itself."""
        return cls(np.eye(6), max_thrust)

    @classmethod
    def from_thrusters(cls, positions, directions, max_thrust: float) -> ThrusterAllocation:
        """Build the matrix from thruster positions and unit force directions (body frame)."""
        positions = np.asarray(positions, dtype=float)
        directions = np.asarray(directions, dtype=float)
        directions = directions / np.linalg.norm(directions, axis=1, keepdims=True)
        tam = np.vstack((directions.T, np.cross(positions, directions).T))
        return cls(tam, max_thrust)

    @property
    def n(self) -> int:
        return self.tam.shape[1]

    @cached_property
    def pinv(self) -> np.ndarray:
        return np.linalg.pinv(self.tam)

    def clamp(self, commands):
        return np.clip(commands, -self.max_thrust, self.max_thrust)


@dataclass(frozen=True)
class VehicleModel:
    rigid: RigidBodyParams
    hydro: HydroParams
    allocation: ThrusterAllocation
    gravity: float = GRAVITY

    @property
    def weight(self) -> float:
        return self.rigid.mass * self.gravity

    @cached_property
    def mass_matrix(self) -> np.ndarray:
        m = self.rigid.mass_matrix() + self.hydro.added_mass
        m.flags.writeable = False
        return m

    @cached_property
    def mass_inverse(self) -> np.ndarray:
        m = self.mass_matrix
        if not np.all(np.isfinite(m)) or np.linalg.cond(m) > MAX_CONDITION:
            raise SingularMass(f"total mass matrix is singular or ill-conditioned (cond={np.linalg.cond(m):.3g})")
        inv = np.linalg.inv(m)
        inv.flags.writeable = False
        return inv

    @cached_property
    def _coriolis_mass(self) -> np.ndarray:
        return 0.5 * (self.mass_matrix + self.mass_matrix.T)

    @cached_property
    def _restoring_arm(self) -> np.ndarray:
        # torque = (B r_b - W r_g) x (body-frame up vector)
        return self.hydro.buoyancy_force * self.hydro.cob - self.weight * self.rigid.cog

    def checksum(self) -> str:
        h = hashlib.sha256()
        for a in (self.rigid.inertia, self.rigid.cog, self.hydro.added_mass, self.hydro.linear_damping,
                  self.hydro.quadratic_damping, self.hydro.cob, self.allocation.tam):
            h.update(np.ascontiguousarray(a).tobytes())
        h.update(np.array([self.rigid.mass, self.hydro.buoyancy_force, self.allocation.max_thrust,
                           self.gravity]).tobytes())
        return h.hexdigest()

    def with_mass(self, mass: float) -> VehicleModel:
        return replace(self, rigid=replace(self.rigid, mass=mass))

    def with_buoyancy(self, buoyancy: float) -> VehicleModel:
        return replace(self, hydro=replace(self.hydro, buoyancy_force=buoyancy))


@dataclass(frozen=True)
class VehicleState:
    pose: Pose = field(default_factory=Pose)
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(6))

    def __post_init__(self):
        v = np.array(self.velocity, dtype=float).reshape(6)
        v.flags.writeable = False
        object.__setattr__(self, "velocity", v)

    @classmethod
    def from_array(cls, x) -> VehicleState:
        x = np.asarray(x, dtype=float)
        return cls(Pose(x[:3], UnitQuaternion.from_array(x[3:7])), x[7:13])

    def as_array(self) -> np.ndarray:
        return np.concatenate((self.pose.position, self.pose.orientation.as_array(), self.velocity))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.as_array())))


# ---------------------------------------------------------------------------
# force terms
# ---------------------------------------------------------------------------

def total_mass(model: VehicleModel) -> np.ndarray:
    """M_RB + M_A; raises SingularMass if it cannot be inverted reliably."""
    model.mass_inverse
    return model.mass_matrix


def coriolis(model: VehicleModel, nu) -> np.ndarray:
    """C_RB(nu) + C_A(nu) in the skew-symmetric parameterization from M_tot nu."""
    nu = np.asarray(nu, dtype=float)
    a = model._coriolis_mass @ nu
    s1 = skew(a[:3])
    s2 = skew(a[3:])
    c = np.zeros((6, 6))
    c[:3, 3:] = -s1
    c[3:, :3] = -s1
    c[3:, 3:] = -s2
    return c


def damping(model: VehicleModel, nu) -> np.ndarray:
    nu = np.asarray(nu, dtype=float)
    return model.hydro.linear_damping + np.diag(model.hydro.quadratic_damping * np.abs(nu))


def restoring(model: VehicleModel, pose: Pose) -> np.ndarray:
    """Gravity + buoyancy wrench acting on the vehicle, in the body frame."""
    return restoring_batch(model, pose.orientation.as_array()[None])[0]


def coriolis_force(model: VehicleModel, nu):
    """C(nu) nu for a batch of velocities (K, 6), without forming C."""
    a = nu @ model._coriolis_mass.T
    v, w = nu[..., :3], nu[..., 3:]
    a1, a2 = a[..., :3], a[..., 3:]
    return np.concatenate((cross(w, a1), cross(v, a1) + cross(w, a2)), axis=-1)


def damping_force(model: VehicleModel, nu):
    return nu @ model.hydro.linear_damping.T + model.hydro.quadratic_damping * np.abs(nu) * nu


def restoring_batch(model: VehicleModel, quat):
    w, x, y, z = quat[..., 0], quat[..., 1], quat[..., 2], quat[..., 3]
    # world up axis expressed in the body frame: third row of R
    up = np.stack((2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)), axis=-1)
    net = model.hydro.buoyancy_force - model.weight
    return np.concatenate((net * up, cross(np.broadcast_to(model._restoring_arm, up.shape), up)), axis=-1)


def acceleration_batch(model: VehicleModel, quat, nu, tau):
    rhs = tau - coriolis_force(model, nu) - damping_force(model, nu) + restoring_batch(model, quat)
    return rhs @ model.mass_inverse.T


def acceleration(model: VehicleModel, state: VehicleState, tau) -> np.ndarray:
    """nu_dot = M_tot^-1 (tau - C(nu) nu - D(nu) nu - g(m)); tau is the total wrench."""
    tau = np.asarray(tau, dtype=float).reshape(6)
    q = state.pose.orientation.as_array()[None]
    return acceleration_batch(model, q, state.velocity[None], tau[None])[0]


# ---------------------------------------------------------------------------
# integration
# ---------------------------------------------------------------------------

def step_batch(model: VehicleModel, pos, quat, nu, tau, dt: float):
    """One explicit-midpoint step for a batch of states with wrench held constant."""
    k1 = acceleration_batch(model, quat, nu, tau)
    nu_mid = nu + 0.5 * dt * k1
    w_half = nu[..., 3:] * (0.5 * dt)
    quat_mid = quat_normalize(quat_mul(quat, quat_exp(w_half)))
    k2 = acceleration_batch(model, quat_mid, nu_mid, tau)
    new_pos, new_quat = oplus_arrays(pos, quat, nu_mid, dt)
    return new_pos, new_quat, nu + dt * k2


def allocate(alloc: ThrusterAllocation, commands) -> np.ndarray:
    """Body wrench produced by thruster commands (saturated at +-max_thrust)."""
    commands = np.asarray(commands, dtype=float)
    if commands.shape[-1] != alloc.n:
        raise DimensionMismatch(f"expected {alloc.n} thruster commands, got {commands.shape[-1]}")
    return alloc.clamp(commands) @ alloc.tam.T


def step(model: VehicleModel, state: VehicleState, control, tau_n=None, dt: float = 0.1) -> VehicleState:
    """Advance one RK2 step with the thruster commands held constant over dt."""
    if not 0.0 < dt <= MAX_DT:
        raise ValueError(f"dt must lie in (0, {MAX_DT}], got {dt}")
    control = np.asarray(control, dtype=float)
    if np.any(np.abs(control) > model.allocation.max_thrust):
        warnings.warn("thruster command saturated at max_thrust", ClampedInput, stacklevel=2)
    tau = allocate(model.allocation, control)
    if tau_n is not None:
        tau = tau + np.asarray(tau_n, dtype=float)
    pos, quat, nu = step_batch(model, state.pose.position[None], state.pose.orientation.as_array()[None],
                               state.velocity[None], tau[None], dt)
    return VehicleState(Pose(pos[0], UnitQuaternion.from_array(quat[0])), nu[0])
