import math
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from auv_mppi.costs import CostWeights, CylinderObstacle, GoalSpec, WaypointCost
from auv_mppi.dynamics import ThrusterAllocation, VehicleState
from auv_mppi.errors import AllSamplesRejected, ConfigError
from auv_mppi.lie import Pose
from auv_mppi.mppi import (REJECTED, MppiConfig, MppiController, SavgolFilter, compute_weights, rollout_cost,
                           rollout_costs, sample_noise, savgol_coefficients, sg_smooth, shift_sequence,
                           update_sequence)

import oracles
from conftest import make_toy_model, random_quaternion

cost_vectors = arrays(np.float64, st.integers(1, 200), elements=st.floats(0, 1e4, allow_nan=False))


def random_instance(rng, model, k=8, horizon=10):
    n = model.allocation.n
    umax = model.allocation.max_thrust
    x0 = VehicleState(Pose(rng.normal(size=3), random_quaternion(rng)), rng.normal(scale=0.5, size=6))
    U = rng.uniform(-0.8 * umax, 0.8 * umax, (horizon, n))
    sigma = rng.uniform(0.05, 0.4, n) * umax
    eps = rng.normal(size=(k, horizon, n)) * sigma
    goal = GoalSpec(Pose(rng.normal(scale=3, size=3), random_quaternion(rng)), rng.normal(scale=0.2, size=6))
    return x0, U, sigma, eps, goal


def eight_thruster_model(rng):
    pos = rng.uniform(-1, 1, (8, 3))
    dirs = rng.normal(size=(8, 3))
    alloc = ThrusterAllocation.from_thrusters(pos, dirs, 150.0)
    return make_toy_model(rng, cog=(0.01, -0.02, -0.05), cob=(0.0, 0.01, 0.08), tam=alloc.tam,
                          max_thrust=150.0, buoyancy=50.0 * 9.81 + 20.0)


# config --------------------------------------------------------------------------

def test_config_validation():
    sigma = np.ones(6)
    for bad in (dict(num_samples=0), dict(horizon=0), dict(inverse_temperature=0.0), dict(control_cost="x"),
                dict(filter=SavgolFilter(4, 2)), dict(filter=SavgolFilter(5, 5)),
                dict(horizon=3, filter=SavgolFilter(5, 2)), dict(dt=0.3), dict(tail_init="x")):
        with pytest.raises(ConfigError):
            MppiConfig(noise_std=sigma, **bad)
    with pytest.raises(ConfigError):
        MppiConfig(noise_std=[1, 0, 1, 1, 1, 1])


def test_paper_defaults(vehicle):
    cfg = MppiConfig.for_model(vehicle)
    assert (cfg.num_samples, cfg.horizon, cfg.inverse_temperature) == (2000, 25, 0.06)
    np.testing.assert_allclose(cfg.noise_std, 0.01 * vehicle.allocation.max_thrust)


# noise ---------------------------------------------------------------------------

def test_noise_vanishes_with_sigma():
    cfg = MppiConfig(noise_std=np.full(6, 1e-300), num_samples=50, horizon=5)
    assert np.abs(sample_noise(cfg, 0)).max() < 1e-290


def test_noise_statistics():
    sigma = np.array([1.0, 2.0, 5.0, 0.5, 3.0, 7.0])
    cfg = MppiConfig(noise_std=sigma, num_samples=10_000, horizon=10, seed=4)
    eps = sample_noise(cfg, 0).reshape(-1, 6)
    n = eps.shape[0]
    assert n == 100_000
    assert np.all(np.abs(eps.mean(axis=0)) < 4 * sigma / math.sqrt(n))
    np.testing.assert_allclose(eps.std(axis=0), sigma, rtol=0.02)


def test_noise_deterministic_and_step_dependent():
    cfg = MppiConfig(noise_std=np.ones(6), num_samples=100, horizon=5, seed=9)
    a, b = sample_noise(cfg, 3), sample_noise(cfg, 3)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, sample_noise(cfg, 4))
    other = MppiConfig(noise_std=np.ones(6), num_samples=100, horizon=5, seed=10)
    assert not np.array_equal(a, sample_noise(other, 3))


def test_noise_rows_independent_of_batch_size():
    small = MppiConfig(noise_std=np.ones(6), num_samples=10, horizon=5, seed=1)
    big = MppiConfig(noise_std=np.ones(6), num_samples=40, horizon=5, seed=1)
    np.testing.assert_array_equal(sample_noise(small, 2), sample_noise(big, 2)[:10])


# rollouts ------------------------------------------------------------------------

def test_rollout_zero_cost_case():
    model = make_toy_model(np.random.default_rng(0))
    cost = WaypointCost(GoalSpec(), CostWeights(np.zeros(10)))
    cfg = MppiConfig(noise_std=np.ones(6), horizon=1, num_samples=1)
    assert rollout_cost(model, VehicleState(), np.zeros((1, 6)), np.zeros((1, 6)), cost, cfg) == 0.0


def test_rollout_counting_case(vehicle):
    # a unit weight on x with the vehicle parked 1 m from the goal makes every q(x_t) exactly 1;
    # the terminal term (also 1) is subtracted to leave the step sum
    horizon = 7
    cost = WaypointCost(GoalSpec(), CostWeights([1.0, 0, 0, 0, 0, 0, 0, 0, 0, 0]))
    x0 = VehicleState(Pose([1.0, 0, 0]))
    cfg = MppiConfig(noise_std=np.ones(8), horizon=horizon, num_samples=1, engine="numpy")
    total = rollout_cost(vehicle, x0, np.zeros((horizon, 8)), np.zeros((horizon, 8)), cost, cfg)
    assert total - 1.0 == horizon


@pytest.mark.parametrize("engine", ["numpy", "compiled"])
@pytest.mark.parametrize("penalty", ["inverse", "literal", "none"])
def test_rollout_matches_straight_line_oracle(engine, penalty):
    rng = np.random.default_rng(21)
    model = eight_thruster_model(rng)
    params = oracles.model_params(model)
    for _ in range(10):
        x0, U, sigma, eps, goal = random_instance(rng, model)
        cfg = MppiConfig(noise_std=sigma, num_samples=8, horizon=10, dt=0.1, control_cost=penalty,
                         engine=engine, inverse_temperature=0.5)
        cost = WaypointCost(goal, CostWeights(rng.uniform(0, 20, 10)))
        got, _ = rollout_costs(model, x0, U, eps, cost, cfg)
        for k in range(8):
            want = oracles.rollout(params, (x0.pose.position, x0.pose.orientation.as_array(), x0.velocity),
                                   U, eps[k], (goal.pose.position, goal.pose.orientation.as_array(),
                                               goal.velocity), cost.weights.q, 0.5, sigma, 0.1,
                                   penalty=penalty)
            assert abs(got[k] - want) < 1e-10 * max(1.0, abs(want))


def test_rollout_collision_sentinel():
    rng = np.random.default_rng(5)
    model = eight_thruster_model(rng)
    params = oracles.model_params(model)
    x0, U, sigma, eps, goal = random_instance(rng, model, k=16)
    obstacles = [CylinderObstacle(x0.pose.position + [0.3, 0, 0], 0.2, 1.0)]
    for engine in ("numpy", "compiled"):
        cfg = MppiConfig(noise_std=sigma, num_samples=16, horizon=10, engine=engine)
        cost = WaypointCost(goal, obstacles=obstacles, margin=0.4)
        got, hit = rollout_costs(model, x0, U, eps, cost, cfg)
        want = [oracles.rollout(params, (x0.pose.position, x0.pose.orientation.as_array(), x0.velocity), U,
                                eps[k], (goal.pose.position, goal.pose.orientation.as_array(), goal.velocity),
                                cost.weights.q, cfg.inverse_temperature, sigma, 0.1,
                                obstacles=[(o.center, o.radius, o.half_height) for o in obstacles],
                                margin=0.4, penalty="none")
                for k in range(16)]
        np.testing.assert_array_equal(hit, np.isinf(want))
        assert hit.any()
        assert np.all(got[hit] == REJECTED)
        np.testing.assert_allclose(got[~hit], np.array(want)[~hit], rtol=1e-10)


def test_rollout_order_independent():
    rng = np.random.default_rng(8)
    model = eight_thruster_model(rng)
    x0, U, sigma, eps, goal = random_instance(rng, model, k=32)
    cfg = MppiConfig(noise_std=sigma, num_samples=32, horizon=10)
    cost = WaypointCost(goal)
    perm = rng.permutation(32)
    a, _ = rollout_costs(model, x0, U, eps, cost, cfg)
    b, _ = rollout_costs(model, x0, U, eps[perm], cost, cfg)
    np.testing.assert_array_equal(a[perm], b)


def test_rollout_shape_mismatch():
    model = make_toy_model()
    cfg = MppiConfig(noise_std=np.ones(6), horizon=5, num_samples=2)
    with pytest.raises(ConfigError):
        rollout_costs(model, VehicleState(), np.zeros((4, 6)), np.zeros((2, 5, 6)), WaypointCost(GoalSpec()), cfg)


# weights -------------------------------------------------------------------------

def test_weights_examples():
    w, beta, eta = compute_weights([3.0, 3.0], 0.06)
    np.testing.assert_array_equal(w, [0.5, 0.5])
    assert beta == 3.0 and eta == 2.0
    lam = 0.06
    w, _, _ = compute_weights([0.0, lam * math.log(3.0)], lam)
    np.testing.assert_allclose(w, [0.75, 0.25], rtol=0, atol=1e-15)
    w, _, _ = compute_weights([REJECTED, 5.0, REJECTED], lam)
    np.testing.assert_array_equal(w, [0.0, 1.0, 0.0])


def test_weights_all_rejected():
    with pytest.raises(AllSamplesRejected):
        compute_weights([REJECTED, REJECTED], 0.06)
    with pytest.raises(AllSamplesRejected):
        compute_weights([1.0, 2.0], 0.06, rejected=np.array([True, True]))


def test_weights_flag_overrides_finite_cost():
    w, beta, _ = compute_weights([0.0, 1.0], 1.0, rejected=np.array([True, False]))
    np.testing.assert_array_equal(w, [0.0, 1.0])
    assert beta == 1.0


@given(cost_vectors, st.floats(1e-3, 100))
def test_weights_properties(costs, lam):
    w, beta, eta = compute_weights(costs, lam)
    assert abs(w.sum() - 1.0) < 1e-12
    # the cheapest sample attains the largest weight (ties only when exp rounds to equal values)
    assert w[np.argmin(costs)] == w.max()
    assert beta == costs.min()
    # unnormalized weight of the best sample is exactly one
    assert w.max() * eta == pytest.approx(1.0, abs=1e-12)
    shifted, _, _ = compute_weights(costs + 123.456, lam)
    np.testing.assert_allclose(shifted, w, atol=1e-12)


@given(cost_vectors, st.floats(1e-3, 10))
def test_weights_monotone(costs, lam):
    w, _, _ = compute_weights(costs, lam)
    order = np.argsort(costs, kind="stable")
    c, ws = costs[order], w[order]
    strict = c[:-1] < c[1:]
    # strictly lower cost never gets less weight (equal when exp underflows)
    assert np.all(ws[:-1][strict] >= ws[1:][strict])
    assert np.all(w[costs == costs.min()] > 0)


def test_weights_low_temperature_limit():
    costs = np.array([3.0, 1.0, 1.5, 2.0, 1.001])
    w, _, _ = compute_weights(costs, 1e-6)
    np.testing.assert_array_equal(w, [0, 1, 0, 0, 0])


# update / shift ------------------------------------------------------------------

def test_update_examples(rng):
    U = rng.normal(size=(5, 3))
    eps = rng.normal(size=(1, 5, 3))
    np.testing.assert_allclose(update_sequence(U, np.array([1.0]), eps), U + eps[0], atol=1e-15)
    pair = np.stack((eps[0], -eps[0]))
    np.testing.assert_allclose(update_sequence(U, np.array([0.5, 0.5]), pair), U, atol=1e-15)


def test_update_brute_force(rng):
    U = rng.normal(size=(6, 4))
    eps = rng.normal(size=(50, 6, 4))
    w = rng.random(50)
    w /= w.sum()
    expected = U.copy()
    for k in range(50):
        for t in range(6):
            for i in range(4):
                expected[t, i] += w[k] * eps[k, t, i]
    np.testing.assert_allclose(update_sequence(U, w, eps), expected, atol=1e-12)


def test_update_clamps(rng):
    out = update_sequence(np.zeros((3, 2)), np.array([1.0]), np.full((1, 3, 2), 50.0), max_thrust=10.0)
    np.testing.assert_array_equal(out, np.full((3, 2), 10.0))


def test_shift_examples():
    a, b, c = [1.0, 2.0], [3.0, 4.0], [5.0, 6.0]
    U = np.array([a, b, c])
    np.testing.assert_array_equal(shift_sequence(U), [b, c, c])
    np.testing.assert_array_equal(shift_sequence(U, "zero"), [b, c, [0, 0]])
    const = np.full((4, 2), 7.0)
    np.testing.assert_array_equal(shift_sequence(const), const)


# Savitzky-Golay ------------------------------------------------------------------

def normal_equation_coefficients(window, order):
    x = np.arange(window) - window // 2
    a = np.array([[xi ** j for j in range(order + 1)] for xi in x], dtype=float)
    # value of the fitted polynomial at x = 0 is the constant coefficient
    return np.linalg.solve(a.T @ a, a.T)[0]


def test_savgol_coefficients_normal_equations():
    np.testing.assert_allclose(savgol_coefficients(5, 2), normal_equation_coefficients(5, 2), atol=1e-14)
    np.testing.assert_allclose(savgol_coefficients(5, 2), np.array([-3, 12, 17, 12, -3]) / 35.0, atol=1e-14)
    for window, order in ((7, 2), (9, 3), (11, 4), (3, 1)):
        np.testing.assert_allclose(savgol_coefficients(window, order),
                                   normal_equation_coefficients(window, order), atol=1e-12)


def test_savgol_matches_scipy_interior():
    signal = pytest.importorskip("scipy.signal")
    rng = np.random.default_rng(2)
    U = rng.normal(size=(25, 8))
    ours = sg_smooth(U, 7, 3)
    ref = signal.savgol_filter(U, 7, 3, axis=0, mode="mirror")
    np.testing.assert_allclose(ours, ref, atol=1e-12)


def test_savgol_examples():
    const = np.full((25, 3), 4.2)
    np.testing.assert_allclose(sg_smooth(const, 5, 2), const, atol=1e-12)
    ramp = np.outer(np.arange(25.0), [1.0, -2.0, 0.5]) + 3.0
    np.testing.assert_allclose(sg_smooth(ramp, 5, 1)[2:-2], ramp[2:-2], atol=1e-9)
    np.testing.assert_allclose(sg_smooth(ramp, 5, 2)[2:-2], ramp[2:-2], atol=1e-9)


def test_savgol_preconditions():
    U = np.zeros((4, 2))
    for window, order in ((4, 2), (5, 2), (3, 3), (-1, 0)):
        with pytest.raises(ConfigError):
            sg_smooth(U, window, order)


@given(st.sampled_from([(5, 0), (5, 1), (5, 2), (7, 2), (7, 3), (9, 4)]),
       arrays(np.float64, 5, elements=st.floats(-3, 3, allow_nan=False)))
def test_savgol_reproduces_polynomials(spec, coeffs):
    window, order = spec
    t = np.linspace(-1.0, 1.0, 25)
    poly = np.polyval(coeffs[:order + 1], t)
    U = np.column_stack((poly, 2 * poly))
    h = window // 2
    np.testing.assert_allclose(sg_smooth(U, window, order)[h:-h], U[h:-h], atol=1e-9)


def test_savgol_reduces_noise():
    rng = np.random.default_rng(1)
    noisy = rng.normal(size=(25, 8))
    smooth = sg_smooth(noisy, 5, 2)
    assert np.abs(np.diff(smooth, axis=0)).mean() < 0.7 * np.abs(np.diff(noisy, axis=0)).mean()


# controller ----------------------------------------------------------------------

def small_controller(vehicle, goal=None, **kw):
    cfg = MppiConfig.for_model(vehicle, num_samples=kw.pop("num_samples", 256), horizon=kw.pop("horizon", 10),
                               **kw)
    return MppiController(vehicle, WaypointCost(goal or GoalSpec()), cfg)


def test_control_step_equilibrium(vehicle):
    ctrl = small_controller(vehicle, noise_fraction=1e-4, num_samples=500)
    sigma = ctrl.config.noise_std
    u, diag = ctrl.control_step(VehicleState())
    assert np.all(np.abs(u) < 2 * sigma)
    for key in ("eta", "beta", "min_cost", "mean_cost", "eta_over_K", "rejected_fraction", "wall_time_ms"):
        assert key in diag
    assert diag["eta_over_K"] == pytest.approx(diag["eta"] / 500)
    assert diag["rejected_fraction"] == 0.0


def test_control_step_deterministic(vehicle):
    a, b = small_controller(vehicle, seed=5), small_controller(vehicle, seed=5)
    x = VehicleState(Pose([-2.0, 1.0, 0.5]))
    for _ in range(3):
        ua, _ = a.control_step(x)
        ub, _ = b.control_step(x)
        assert ua.tobytes() == ub.tobytes()
    a.reset()
    ua, _ = a.control_step(x)
    c = small_controller(vehicle, seed=5)
    uc, _ = c.control_step(x)
    assert ua.tobytes() == uc.tobytes()


def test_control_step_engines_agree(vehicle):
    x = VehicleState(Pose([-3.0, 0.5, 0.2]), [0.1, 0, 0, 0, 0, 0.02])
    a = small_controller(vehicle, seed=2, engine="numpy")
    b = small_controller(vehicle, seed=2, engine="compiled")
    for _ in range(3):
        ua, da = a.control_step(x)
        ub, db = b.control_step(x)
        np.testing.assert_allclose(ua, ub, rtol=1e-9, atol=1e-9)
        assert da["beta"] == pytest.approx(db["beta"], rel=1e-12)


def test_control_step_respects_limits_and_filter(vehicle):
    ctrl = small_controller(vehicle, noise_fraction=2.0, filter=SavgolFilter(5, 2))
    x = VehicleState(Pose([-30.0, 0, 0]))
    for _ in range(3):
        u, _ = ctrl.control_step(x)
        assert np.abs(u).max() <= vehicle.allocation.max_thrust
        assert np.abs(ctrl.U).max() <= vehicle.allocation.max_thrust


def test_control_step_moves_toward_goal(vehicle):
    ctrl = small_controller(vehicle, goal=GoalSpec.at(10.0, 0.0, 0.0), num_samples=500, horizon=25)
    wrench = np.zeros(6)
    for _ in range(5):
        u, _ = ctrl.control_step(VehicleState())
        wrench = vehicle.allocation.tam @ u
    assert wrench[0] > 0


def test_all_rejected_propagates_and_fallback(vehicle):
    cost = WaypointCost(GoalSpec(), obstacles=[CylinderObstacle([0, 0, 0], 1.0, 1.0)])
    ctrl = MppiController(vehicle, cost, MppiConfig.for_model(vehicle, num_samples=16, horizon=5))
    with pytest.raises(AllSamplesRejected):
        ctrl.control_step(VehicleState())
    ctrl.U[:] = 1.0
    ctrl.U[-1] = 2.0
    u, diag = ctrl.fallback_step()
    np.testing.assert_array_equal(u, np.ones(8))
    np.testing.assert_array_equal(ctrl.U[-1], np.full(8, 2.0))
    assert diag["rejected_fraction"] == 1.0


def test_noise_size_must_match_thrusters(vehicle):
    with pytest.raises(ConfigError):
        MppiController(vehicle, WaypointCost(GoalSpec()), MppiConfig(noise_std=np.ones(6)))


THREAD_SCRIPT = """
import numpy as np
from auv_mppi.config import default_vehicle
from auv_mppi.costs import GoalSpec, WaypointCost
from auv_mppi.dynamics import VehicleState
from auv_mppi.lie import Pose
from auv_mppi.mppi import MppiConfig, MppiController
v = default_vehicle()
c = MppiController(v, WaypointCost(GoalSpec.at(10, 0, 0)),
                   MppiConfig.for_model(v, num_samples=300, horizon=10, seed=3, workers={workers}))
out = [c.control_step(VehicleState(Pose([0.5, 0.2, 0])))[0] for _ in range(3)]
print(np.array(out).tobytes().hex())
"""


def test_bit_identical_across_thread_counts():
    results = []
    for workers in (1, 4):
        env = {"NUMBA_NUM_THREADS": "4", "PATH": "/usr/bin:/bin"}
        import os
        env.update({k: v for k, v in os.environ.items() if k not in env})
        out = subprocess.run([sys.executable, "-c", THREAD_SCRIPT.format(workers=workers)], env=env,
                             capture_output=True, text=True, check=True)
        results.append(out.stdout.strip())
    assert results[0] == results[1]
