"""SE(3) and unit-quaternion math.

Twists are 6-vectors ordered (linear; angular), matching the body-frame
force ordering (surge, sway, heave, roll, pitch, yaw) used by the dynamics.
Quaternions are stored scalar-first, (w, x, y, z), with w >= 0.

The array helpers (``quat_mul``, ``quat_exp`` ...) broadcast over leading
axes and are what the batched rollout engine uses; ``Pose`` and
``UnitQuaternion`` wrap them for single values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import AngleNearPi

# below this rotation angle the Rodrigues / V-matrix coefficients use Taylor series
SMALL_ANGLE = 1e-7
# coefficients that subtract nearly equal terms switch to a series below this angle
SERIES_ANGLE = 1e-2
# log is refused this close to pi (axis sign becomes ill-conditioned)
PI_MARGIN = 1e-6


def skew(v):
    """Hat operator: 3-vector -> 3x3 skew-symmetric matrix."""
    v = np.asarray(v, dtype=float)
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def cross(a, b):
    """Row-wise cross product; faster than np.cross for (K, 3) arrays."""
    ax, ay, az = a[..., 0], a[..., 1], a[..., 2]
    bx, by, bz = b[..., 0], b[..., 1], b[..., 2]
    return np.stack((ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx), axis=-1)


# ---------------------------------------------------------------------------
# quaternion array helpers
# ---------------------------------------------------------------------------

def quat_mul(a, b):
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack((
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ), axis=-1)


def quat_conj(q):
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_normalize(q):
    """Scale to unit norm and flip sign so that w >= 0."""
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    return np.where(q[..., :1] < 0.0, -q, q)


def quat_exp(rotvec):
    """Rotation vector -> unit quaternion."""
    rotvec = np.asarray(rotvec, dtype=float)
    theta = np.linalg.norm(rotvec, axis=-1, keepdims=True)
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    half = 0.5 * theta
    # sin(theta/2)/theta with its Taylor limit
    k = np.where(small, 0.5 - theta * theta / 48.0, np.sin(0.5 * safe) / safe)
    return np.concatenate((np.cos(half), k * rotvec), axis=-1)


def quat_log(q):
    """Unit quaternion (w >= 0) -> rotation vector with norm in [0, pi]."""
    q = np.asarray(q, dtype=float)
    w = q[..., :1]
    v = q[..., 1:]
    s = np.linalg.norm(v, axis=-1, keepdims=True)
    theta = 2.0 * np.arctan2(s, np.abs(w))
    sign = np.where(w < 0.0, -1.0, 1.0)
    small = theta < SMALL_ANGLE
    safe_s = np.where(small, 1.0, s)
    safe_w = np.where(small, w, 1.0)
    k = np.where(small, 2.0 / safe_w * (1.0 - s * s / (3.0 * safe_w * safe_w)), theta / safe_s)
    return sign * k * v


def quat_to_rotmat(q):
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r = np.stack((
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ), axis=-1)
    return r.reshape(q.shape[:-1] + (3, 3))


def quat_rotate(q, v):
    """Rotate vectors v by quaternions q (body -> world)."""
    w = q[..., :1]
    u = q[..., 1:]
    t = 2.0 * cross(u, v)
    return v + w * t + cross(u, t)


def quat_rotate_inverse(q, v):
    """Rotate world vectors into the body frame."""
    return quat_rotate(quat_conj(q), v)


def angle_between(q, q_des):
    """Angle of q^-1 * q_des in [0, pi]; insensitive to the sign of either input."""
    q = np.asarray(q, dtype=float)
    q_des = np.asarray(q_des, dtype=float)
    qw, qv = q[..., :1], q[..., 1:]
    pw, pv = q_des[..., :1], q_des[..., 1:]
    # vector part of q^-1 * q_des, arranged so that q_des = +-q cancels exactly
    vec = qw * pv - pw * qv - cross(qv, pv)
    w = np.sum(q * q_des, axis=-1)
    return 2.0 * np.arctan2(np.linalg.norm(vec, axis=-1), np.abs(w))


def _v_coeffs(theta):
    """Coefficients a, b of V = I + a[w]x + b[w]x^2."""
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    sh = np.sin(0.5 * safe)
    a = np.where(small, 0.5 - theta * theta / 24.0, 2.0 * sh * sh / (safe * safe))
    b = np.where(theta < SERIES_ANGLE, _b_series(theta), (safe - np.sin(safe)) / safe ** 3)
    return a, b


def _b_series(theta):
    # (theta - sin theta) / theta^3
    t2 = theta * theta
    return 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0 - t2 * t2 * t2 / 362880.0


def se3_exp_translation(v, w):
    """V(w) @ v, row-wise, for twists (v, w) with rotation vector w."""
    theta = np.linalg.norm(w, axis=-1, keepdims=True)
    a, b = _v_coeffs(theta)
    wxv = cross(w, v)
    return v + a * wxv + b * cross(w, wxv)


def oplus_arrays(position, quat, twist, dt):
    """Batched right-composition (p, q) o Exp(twist * dt).

    position (..., 3), quat (..., 4), twist (..., 6); dt scalar or broadcastable.
    Returns (position', quat') with the quaternion renormalized.
    """
    v = twist[..., :3] * dt
    w = twist[..., 3:] * dt
    t = se3_exp_translation(v, w)
    new_pos = position + quat_rotate(quat, t)
    new_quat = quat_normalize(quat_mul(quat, quat_exp(w)))
    return new_pos, new_quat


# ---------------------------------------------------------------------------
# value types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class UnitQuaternion:
    w: float = 1.0
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    def __post_init__(self):
        q = np.array([self.w, self.x, self.y, self.z], dtype=float)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0.0:
            raise ValueError("quaternion must be finite and non-zero")
        q = quat_normalize(q)
        for name, val in zip("wxyz", q):
            object.__setattr__(self, name, float(val))

    @classmethod
    def from_array(cls, q) -> UnitQuaternion:
        return cls(*np.asarray(q, dtype=float))

    @classmethod
    def from_rotvec(cls, rotvec) -> UnitQuaternion:
        return cls.from_array(quat_exp(np.asarray(rotvec, dtype=float)))

    @classmethod
    def from_axis_angle(cls, axis, angle: float) -> UnitQuaternion:
        axis = np.asarray(axis, dtype=float)
        return cls.from_rotvec(axis / np.linalg.norm(axis) * angle)

    @classmethod
    def from_yaw(cls, yaw: float) -> UnitQuaternion:
        return cls(math.cos(0.5 * yaw), 0.0, 0.0, math.sin(0.5 * yaw))

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    def __mul__(self, other: UnitQuaternion) -> UnitQuaternion:
        return UnitQuaternion.from_array(quat_mul(self.as_array(), other.as_array()))

    def inverse(self) -> UnitQuaternion:
        return UnitQuaternion(self.w, -self.x, -self.y, -self.z)

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_rotmat(self.as_array())

    def rotvec(self) -> np.ndarray:
        return quat_log(self.as_array())

    def angle(self) -> float:
        return float(2.0 * math.atan2(math.sqrt(self.x ** 2 + self.y ** 2 + self.z ** 2), abs(self.w)))

    def yaw(self) -> float:
        return math.atan2(2.0 * (self.w * self.z + self.x * self.y),
                          1.0 - 2.0 * (self.y ** 2 + self.z ** 2))


@dataclass(frozen=True)
class Pose:
    """Rigid-body pose in the world frame."""

    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    orientation: UnitQuaternion = field(default_factory=UnitQuaternion)

    def __post_init__(self):
        p = np.array(self.position, dtype=float).reshape(3)
        if not np.all(np.isfinite(p)):
            raise ValueError("pose position must be finite")
        p.flags.writeable = False
        object.__setattr__(self, "position", p)

    @classmethod
    def identity(cls) -> Pose:
        return cls()

    @property
    def rotation(self) -> np.ndarray:
        return self.orientation.rotation_matrix()

    def compose(self, other: Pose) -> Pose:
        q = self.orientation.as_array()
        pos = self.position + quat_rotate(q, other.position)
        return Pose(pos, self.orientation * other.orientation)

    __matmul__ = compose

    def inverse(self) -> Pose:
        qi = self.orientation.inverse()
        return Pose(-quat_rotate(qi.as_array(), self.position), qi)

    def allclose(self, other: Pose, atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.position, other.position, rtol=0.0, atol=atol)
                    and quat_angle_error(self.orientation, other.orientation) <= atol)


def as_twist(xi) -> np.ndarray:
    xi = np.asarray(xi, dtype=float).reshape(6)
    if not np.all(np.isfinite(xi)):
        raise ValueError("twist entries must be finite")
    return xi


def exp_map(xi) -> Pose:
    """Closed-form SE(3) exponential of a (linear; angular) twist."""
    xi = as_twist(xi)
    t = se3_exp_translation(xi[:3], xi[3:])
    return Pose(t, UnitQuaternion.from_array(quat_exp(xi[3:])))


def log_map(m: Pose) -> np.ndarray:
    """Inverse of :func:`exp_map` on the principal branch.

    Raises AngleNearPi when the rotation angle is within 1e-6 of pi.
    """
    q = m.orientation.as_array()
    w = quat_log(q)
    theta = float(np.linalg.norm(w))
    if theta > math.pi - PI_MARGIN:
        raise AngleNearPi(f"rotation angle {theta!r} too close to pi for the log map")
    if theta < SERIES_ANGLE:
        t2 = theta * theta
        c = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    else:
        half = 0.5 * theta
        c = (1.0 - half * math.cos(half) / math.sin(half)) / (theta * theta)
    p = m.position
    wxp = np.cross(w, p)
    v = p - 0.5 * wxp + c * np.cross(w, wxp)
    return np.concatenate((v, w))


def oplus(m: Pose, xi, dt: float) -> Pose:
    """Right-addition m o Exp(xi * dt) with a body-frame twist xi."""
    if dt < 0:
        raise ValueError("dt must be non-negative")
    xi = as_twist(xi)
    pos, q = oplus_arrays(m.position, m.orientation.as_array(), xi, dt)
    return Pose(pos, UnitQuaternion.from_array(q))


def adjoint(m: Pose) -> np.ndarray:
    """6x6 adjoint [[R, [p]x R], [0, R]] mapping body twists to world twists."""
    r = m.rotation
    out = np.zeros((6, 6))
    out[:3, :3] = r
    out[3:, 3:] = r
    out[:3, 3:] = skew(m.position) @ r
    return out


def quat_angle_error(q: UnitQuaternion, q_des: UnitQuaternion) -> float:
    """Rotation angle (radians, in [0, pi]) separating q from q_des."""
    return float(angle_between(q.as_array(), q_des.as_array()))
