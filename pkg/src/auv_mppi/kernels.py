"""Compiled rollout loop.

Same arithmetic as ``dynamics.step_batch`` + ``costs.WaypointCost`` written
per sample so numba can run samples on parallel threads. Each sample is
computed independently, so results do not depend on the thread count.
"""

from __future__ import annotations

import math

import numba
import numpy as np
from numba import njit, prange

# the bundled TBB is too old on some systems; prefer OpenMP to avoid the warning
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

SMALL_ANGLE = 1e-7
SERIES_ANGLE = 1e-2


@njit(cache=True, inline="always")
def _cross(ax, ay, az, bx, by, bz):
    return ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx


@njit(cache=True)
def _accel(q, nu, tau, minv, mc, dlin, dq, net, arm, out):
    w, x, y, z = q[0], q[1], q[2], q[3]
    upx = 2.0 * (x * z - w * y)
    upy = 2.0 * (y * z + w * x)
    upz = 1.0 - 2.0 * (x * x + y * y)
    a = np.empty(6)
    for i in range(6):
        s = 0.0
        for j in range(6):
            s += mc[i, j] * nu[j]
        a[i] = s
    # C(nu) nu
    c0, c1, c2 = _cross(nu[3], nu[4], nu[5], a[0], a[1], a[2])
    d0, d1, d2 = _cross(nu[0], nu[1], nu[2], a[0], a[1], a[2])
    e0, e1, e2 = _cross(nu[3], nu[4], nu[5], a[3], a[4], a[5])
    t0, t1, t2 = _cross(arm[0], arm[1], arm[2], upx, upy, upz)
    rhs = np.empty(6)
    rhs[0] = tau[0] - c0 + net * upx
    rhs[1] = tau[1] - c1 + net * upy
    rhs[2] = tau[2] - c2 + net * upz
    rhs[3] = tau[3] - (d0 + e0) + t0
    rhs[4] = tau[4] - (d1 + e1) + t1
    rhs[5] = tau[5] - (d2 + e2) + t2
    for i in range(6):
        s = 0.0
        for j in range(6):
            s += dlin[i, j] * nu[j]
        rhs[i] -= s + dq[i] * abs(nu[i]) * nu[i]
    for i in range(6):
        s = 0.0
        for j in range(6):
            s += minv[i, j] * rhs[j]
        out[i] = s


@njit(cache=True)
def _qmul_exp(q, wx, wy, wz, out):
    """out = normalize(q * exp(w)), sign-canonical."""
    th = math.sqrt(wx * wx + wy * wy + wz * wz)
    if th < SMALL_ANGLE:
        k = 0.5 - th * th / 48.0
    else:
        k = math.sin(0.5 * th) / th
    bw = math.cos(0.5 * th)
    bx, by, bz = k * wx, k * wy, k * wz
    aw, ax, ay, az = q[0], q[1], q[2], q[3]
    rw = aw * bw - ax * bx - ay * by - az * bz
    rx = aw * bx + ax * bw + ay * bz - az * by
    ry = aw * by - ax * bz + ay * bw + az * bx
    rz = aw * bz + ax * by - ay * bx + az * bw
    n = math.sqrt(rw * rw + rx * rx + ry * ry + rz * rz)
    if rw < 0.0:
        n = -n
    out[0] = rw / n
    out[1] = rx / n
    out[2] = ry / n
    out[3] = rz / n


@njit(cache=True, parallel=True)
def rollout_kernel(pos0, quat0, nu0, wrench, penalty, dt, minv, mc, dlin, dq, net, arm,
                   goal_pos, goal_quat, goal_vel, qw, squared, obstacles, margin):
    k_samples, horizon, _ = wrench.shape
    costs = np.zeros(k_samples)
    hit = np.zeros(k_samples, dtype=numba.boolean)
    for k in prange(k_samples):
        pos = pos0.copy()
        q = quat0.copy()
        nu = nu0.copy()
        k1 = np.empty(6)
        k2 = np.empty(6)
        nm = np.empty(6)
        qm = np.empty(4)
        total = 0.0
        collided = False
        for t in range(horizon):
            tau = wrench[k, t]
            _accel(q, nu, tau, minv, mc, dlin, dq, net, arm, k1)
            for i in range(6):
                nm[i] = nu[i] + 0.5 * dt * k1[i]
            _qmul_exp(q, nu[3] * 0.5 * dt, nu[4] * 0.5 * dt, nu[5] * 0.5 * dt, qm)
            _accel(qm, nm, tau, minv, mc, dlin, dq, net, arm, k2)
            # pose: (p, q) o Exp(nu_mid * dt)
            vx, vy, vz = nm[0] * dt, nm[1] * dt, nm[2] * dt
            wx, wy, wz = nm[3] * dt, nm[4] * dt, nm[5] * dt
            th = math.sqrt(wx * wx + wy * wy + wz * wz)
            t2 = th * th
            if th < SMALL_ANGLE:
                ca = 0.5 - t2 / 24.0
            else:
                sh = math.sin(0.5 * th)
                ca = 2.0 * sh * sh / t2
            if th < SERIES_ANGLE:
                cb = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0 - t2 * t2 * t2 / 362880.0
            else:
                cb = (th - math.sin(th)) / (t2 * th)
            c1x, c1y, c1z = _cross(wx, wy, wz, vx, vy, vz)
            c2x, c2y, c2z = _cross(wx, wy, wz, c1x, c1y, c1z)
            tx = vx + ca * c1x + cb * c2x
            ty = vy + ca * c1y + cb * c2y
            tz = vz + ca * c1z + cb * c2z
            # rotate t by q
            uw = q[0]
            ux2, uy2, uz2 = _cross(q[1], q[2], q[3], tx, ty, tz)
            ux2, uy2, uz2 = 2.0 * ux2, 2.0 * uy2, 2.0 * uz2
            rx, ry, rz = _cross(q[1], q[2], q[3], ux2, uy2, uz2)
            pos[0] += tx + uw * ux2 + rx
            pos[1] += ty + uw * uy2 + ry
            pos[2] += tz + uw * uz2 + rz
            _qmul_exp(q, wx, wy, wz, qm)
            for i in range(4):
                q[i] = qm[i]
            for i in range(6):
                nu[i] = nu[i] + dt * k2[i]
            total += _state_cost(pos, q, nu, goal_pos, goal_quat, goal_vel, qw, squared) + penalty[k, t]
            if not collided:
                for j in range(obstacles.shape[0]):
                    dx = pos[0] - obstacles[j, 0]
                    dy = pos[1] - obstacles[j, 1]
                    dz = pos[2] - obstacles[j, 2]
                    r = obstacles[j, 3] + margin
                    if dx * dx + dy * dy <= r * r and abs(dz) <= obstacles[j, 4] + margin:
                        collided = True
        total += _state_cost(pos, q, nu, goal_pos, goal_quat, goal_vel, qw, squared)
        costs[k] = total
        hit[k] = collided
    return costs, hit


@njit(cache=True)
def _state_cost(pos, q, nu, goal_pos, goal_quat, goal_vel, qw, squared):
    s = 0.0
    for i in range(3):
        e = pos[i] - goal_pos[i]
        s += qw[i] * e * e
    # vector part of q^-1 * q_des (same arrangement as lie.angle_between)
    qw_, qx, qy, qz = q[0], q[1], q[2], q[3]
    pw, px, py, pz = goal_quat[0], goal_quat[1], goal_quat[2], goal_quat[3]
    cx, cy, cz = _cross(qx, qy, qz, px, py, pz)
    rx = qw_ * px - pw * qx - cx
    ry = qw_ * py - pw * qy - cy
    rz = qw_ * pz - pw * qz - cz
    rw = qw_ * pw + qx * px + qy * py + qz * pz
    ang = 2.0 * math.atan2(math.sqrt(rx * rx + ry * ry + rz * rz), abs(rw))
    s += qw[3] * ang * ang
    for i in range(6):
        e = nu[i] - goal_vel[i]
        s += qw[4 + i] * e * e
    if squared:
        return s
    return math.sqrt(s)


def obstacle_array(obstacles) -> np.ndarray:
    if not obstacles:
        return np.zeros((0, 5))
    return np.array([[*ob.center, ob.radius, ob.half_height] for ob in obstacles], dtype=float)


def set_threads(n: int):
    numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))
