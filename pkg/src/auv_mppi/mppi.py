"""Model Predictive Path Integral controller.

One call to :meth:`MppiController.control_step` runs a full iteration:
sample perturbations, roll every sample out through the vehicle model while
accumulating cost, weight the samples with a min-shifted softmax, update the
action sequence, optionally smooth it, emit the first action and shift the
sequence one step forward.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .costs import WaypointCost
from .dynamics import VehicleModel, VehicleState, step_batch
from .errors import AllSamplesRejected, ConfigError, NonFiniteState

# cost value reported for samples discarded by the collision test
REJECTED = math.inf

DIAGNOSTIC_COLUMNS = ("step", "wall_time_ms", "beta", "eta", "eta_over_K", "min_cost", "mean_cost",
                      "rejected_fraction")


@dataclass(frozen=True)
class SavgolFilter:
    window: int = 5
    poly_order: int = 2


@dataclass(frozen=True)
class MppiConfig:
    """Controller hyperparameters.

    noise_std is the per-thruster standard deviation of the perturbations [N].
    control_cost selects the penalty term added at every rollout step:
    ``"inverse"`` uses lambda * u^T Sigma^-1 eps with Sigma = diag(noise_std^2),
    ``"literal"`` uses lambda * u^T diag(noise_std) eps, and ``"none"`` drops it.
    """

    noise_std: np.ndarray
    num_samples: int = 2000
    horizon: int = 25
    inverse_temperature: float = 0.06
    filter: SavgolFilter | None = None
    seed: int = 0
    dt: float = 0.1
    control_cost: str = "none"
    tail_init: str = "copy"
    workers: int = 0
    engine: str = "compiled"

    def __post_init__(self):
        sigma = np.array(self.noise_std, dtype=float).reshape(-1)
        sigma.flags.writeable = False
        object.__setattr__(self, "noise_std", sigma)
        if self.num_samples < 1 or self.horizon < 1:
            raise ConfigError("num_samples and horizon must be >= 1")
        if not self.inverse_temperature > 0:
            raise ConfigError("inverse_temperature must be positive")
        if np.any(sigma <= 0):
            raise ConfigError("noise_std entries must be positive")
        if not 0 < self.dt <= 0.2:
            raise ConfigError("model dt must lie in (0, 0.2]")
        if self.control_cost not in ("inverse", "literal", "none"):
            raise ConfigError(f"unknown control_cost {self.control_cost!r}")
        if self.engine not in ("compiled", "numpy"):
            raise ConfigError(f"unknown engine {self.engine!r}")
        if self.tail_init not in ("copy", "zero"):
            raise ConfigError(f"unknown tail_init {self.tail_init!r}")
        if self.filter is not None:
            check_savgol(self.filter.window, self.filter.poly_order, self.horizon)

    @classmethod
    def for_model(cls, model: VehicleModel, noise_fraction: float = 0.01, **kwargs) -> MppiConfig:
        """Noise set to a fraction of max thrust on every thruster."""
        sigma = np.full(model.allocation.n, noise_fraction * model.allocation.max_thrust)
        return cls(noise_std=sigma, **kwargs)


# ---------------------------------------------------------------------------
# algorithm pieces
# ---------------------------------------------------------------------------

def sample_noise(config: MppiConfig, step: int):
    """K x tau x n Gaussian perturbations for control step ``step``.

    The stream is keyed on (seed, step); row k always belongs to sample k,
    so the batch does not depend on how rollouts are later scheduled.
    """
    bitgen = np.random.Philox(key=[config.seed & 0xFFFFFFFFFFFFFFFF, step & 0xFFFFFFFFFFFFFFFF])
    z = np.random.Generator(bitgen).standard_normal((config.num_samples, config.horizon, config.noise_std.size))
    return z * config.noise_std


def control_penalty(U, eps, config: MppiConfig):
    """Per-step control cost term, shape (K, tau)."""
    lam = config.inverse_temperature
    if config.control_cost == "inverse":
        return lam * np.einsum("tn,ktn->kt", U / config.noise_std ** 2, eps)
    if config.control_cost == "literal":
        return lam * np.einsum("tn,ktn->kt", U * config.noise_std, eps)
    return np.zeros(eps.shape[:2])


def rollout_costs(model: VehicleModel, x0: VehicleState, U, eps, cost: WaypointCost, config: MppiConfig,
                  tau_n=None):
    """Accumulated cost of every perturbed rollout.

    Returns (costs, rejected) with rejected samples carrying ``REJECTED``.
    Perturbed commands are clamped to +-max_thrust before use; the clamped
    perturbation is what enters both the model and the control cost.
    """
    alloc = model.allocation
    U = np.asarray(U, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if eps.ndim == 2:
        eps = eps[None]
    if U.shape != eps.shape[1:]:
        raise ConfigError(f"action sequence shape {U.shape} does not match noise {eps.shape[1:]}")
    eps = alloc.clamp(U + eps) - U
    wrench = (U + eps) @ alloc.tam.T
    if tau_n is not None:
        wrench = wrench + np.asarray(tau_n, dtype=float)
    penalty = control_penalty(U, eps, config)
    if config.engine == "numpy":
        total, hit = _rollout_numpy(model, x0, wrench, penalty, cost, config.dt)
    else:
        total, hit = kernels.rollout_kernel(
            x0.pose.position, x0.pose.orientation.as_array(), np.array(x0.velocity), wrench, penalty,
            float(config.dt), model.mass_inverse, model._coriolis_mass, model.hydro.linear_damping,
            model.hydro.quadratic_damping, model.hydro.buoyancy_force - model.weight, model._restoring_arm,
            cost.goal.pose.position, cost.goal.pose.orientation.as_array(), np.array(cost.goal.velocity),
            cost.weights.q, cost.squared, kernels.obstacle_array(cost.obstacles), float(cost.margin))
    if not np.all(np.isfinite(total)):
        raise NonFiniteState("rollout produced non-finite states; check the vehicle parameters")
    return np.where(hit, REJECTED, total), hit


def _rollout_numpy(model, x0, wrench, penalty, cost, dt):
    k, horizon, _ = wrench.shape
    pos = np.repeat(x0.pose.position[None], k, axis=0)
    quat = np.repeat(x0.pose.orientation.as_array()[None], k, axis=0)
    nu = np.repeat(x0.velocity[None], k, axis=0)
    total = np.zeros(k)
    hit = np.zeros(k, dtype=bool)
    for t in range(horizon):
        pos, quat, nu = step_batch(model, pos, quat, nu, wrench[:, t], dt)
        total += cost.step(pos, quat, nu) + penalty[:, t]
        hit |= cost.collides(pos)
    return total + cost.terminal(pos, quat, nu), hit


def rollout_cost(model: VehicleModel, x0: VehicleState, U, eps, cost: WaypointCost, config: MppiConfig,
                 tau_n=None) -> float:
    """Cost-to-go of a single perturbed sequence (``REJECTED`` on collision)."""
    costs, _ = rollout_costs(model, x0, U, np.asarray(eps)[None], cost, config, tau_n)
    return float(costs[0])


def compute_weights(costs, inverse_temperature: float, rejected=None):
    """Min-shifted softmax weights.

    Returns (weights, beta, eta). Rejected samples (flagged, or non-finite
    cost) receive weight 0 and never reach the exponential.
    """
    costs = np.asarray(costs, dtype=float)
    if rejected is None:
        rejected = ~np.isfinite(costs)
    if np.all(rejected):
        raise AllSamplesRejected("every sample was rejected")
    kept = costs[~rejected]
    beta = kept.min()
    unnormalized = np.zeros_like(costs)
    unnormalized[~rejected] = np.exp(-(kept - beta) / inverse_temperature)
    eta = unnormalized.sum()
    return unnormalized / eta, float(beta), float(eta)


def update_sequence(U, weights, eps, max_thrust: float | None = None):
    """U_t + sum_k w_k eps^k_t, clamped when max_thrust is given."""
    out = np.asarray(U, dtype=float) + np.tensordot(weights, eps, axes=1)
    if max_thrust is not None:
        out = np.clip(out, -max_thrust, max_thrust)
    return out


def shift_sequence(U, tail: str = "copy"):
    """Drop the first action; the freed last slot repeats the old last entry or is zeroed."""
    U = np.asarray(U, dtype=float)
    out = np.empty_like(U)
    out[:-1] = U[1:]
    out[-1] = U[-1] if tail == "copy" else 0.0
    return out


def check_savgol(window: int, poly_order: int, length: int | None = None):
    if window < 1 or window % 2 == 0:
        raise ConfigError(f"Savitzky-Golay window must be a positive odd number, got {window}")
    if not 0 <= poly_order < window:
        raise ConfigError("Savitzky-Golay poly_order must be smaller than the window")
    if length is not None and window > length:
        raise ConfigError(f"Savitzky-Golay window {window} exceeds the horizon {length}")


def savgol_coefficients(window: int, poly_order: int):
    """Smoothing weights: value at the window centre of the least-squares polynomial fit."""
    check_savgol(window, poly_order)
    half = window // 2
    x = np.arange(-half, half + 1, dtype=float)
    vander = np.vander(x, poly_order + 1, increasing=True)
    return np.linalg.pinv(vander)[0]


def sg_smooth(U, window: int = 5, poly_order: int = 2):
    """Savitzky-Golay smoothing along the horizon axis, mirror padded (edge not repeated)."""
    U = np.asarray(U, dtype=float)
    check_savgol(window, poly_order, U.shape[0])
    coeffs = savgol_coefficients(window, poly_order)
    half = window // 2
    if half == 0:
        return U.copy()
    if U.shape[0] < 2:
        return U.copy()
    padded = np.pad(U, ((half, half), (0, 0)), mode="reflect")
    out = np.zeros_like(U)
    for j, c in enumerate(coeffs):
        out += c * padded[j:j + U.shape[0]]
    return out


# ---------------------------------------------------------------------------
# controller
# ---------------------------------------------------------------------------

def default_workers() -> int:
    env = os.environ.get("AUV_MPPI_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


@dataclass
class MppiController:
    model: VehicleModel
    cost: WaypointCost
    config: MppiConfig
    tau_n: np.ndarray | None = None
    U: np.ndarray = field(init=False)
    step_count: int = field(init=False, default=0)

    def __post_init__(self):
        if self.config.noise_std.size != self.model.allocation.n:
            raise ConfigError(f"noise_std has {self.config.noise_std.size} entries, "
                              f"vehicle has {self.model.allocation.n} thrusters")
        self.reset()

    def reset(self):
        self.U = np.zeros((self.config.horizon, self.model.allocation.n))
        self.step_count = 0

    def _evaluate(self, state: VehicleState, eps):
        kernels.set_threads(self.config.workers or default_workers())
        return rollout_costs(self.model, state, self.U, eps, self.cost, self.config, self.tau_n)

    def control_step(self, state: VehicleState):
        """One MPPI iteration from ``state``; returns (first action, diagnostics)."""
        t0 = time.perf_counter()
        cfg = self.config
        alloc = self.model.allocation
        eps = sample_noise(cfg, self.step_count)
        eps = alloc.clamp(self.U + eps) - self.U
        costs, rejected = self._evaluate(state, eps)
        weights, beta, eta = compute_weights(costs, cfg.inverse_temperature, rejected)
        U = update_sequence(self.U, weights, eps, alloc.max_thrust)
        if cfg.filter is not None:
            U = alloc.clamp(sg_smooth(U, cfg.filter.window, cfg.filter.poly_order))
        u0 = U[0].copy()
        self.U = shift_sequence(U, cfg.tail_init)
        kept = costs[~rejected]
        diag = {
            "step": self.step_count,
            "wall_time_ms": 1e3 * (time.perf_counter() - t0),
            "beta": beta,
            "eta": eta,
            "eta_over_K": eta / cfg.num_samples,
            "min_cost": float(kept.min()),
            "mean_cost": float(kept.mean()),
            "rejected_fraction": float(rejected.mean()),
        }
        self.step_count += 1
        return u0, diag

    def fallback_step(self):
        """Emit the current plan's first action without an update (used when every sample collides)."""
        u0 = self.U[0].copy()
        self.U = shift_sequence(self.U, self.config.tail_init)
        diag = {c: math.nan for c in DIAGNOSTIC_COLUMNS}
        diag.update(step=self.step_count, wall_time_ms=0.0, rejected_fraction=1.0)
        self.step_count += 1
        return u0, diag
