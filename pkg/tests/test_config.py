import textwrap

import numpy as np
import pytest

from auv_mppi.config import (KNOWN_KEYS, SCENARIO_DEFAULTS, apply_overrides, data_path, default_vehicle,
                             load_scenario, load_vehicle, parse_override)
from auv_mppi.errors import ConfigError, SingularMass

VEHICLE = """\
name: box
mass: 100.0
inertia: [10, 12, 14]
cog: [0, 0, 0]
cob: [0, 0, 0.1]
buoyancy_force: neutral
added_mass: [10, 20, 30, 1, 2, 3]
linear_damping: [5, 5, 5, 1, 1, 1]
quadratic_damping: [1, 1, 1, 1, 1, 1]
max_thrust: 50
tam: [[1, 0, 0, 0, 0, 0],
      [0, 1, 0, 0, 0, 0],
      [0, 0, 1, 0, 0, 0],
      [0, 0, 0, 1, 0, 0],
      [0, 0, 0, 0, 1, 0],
      [0, 0, 0, 0, 0, 1]]
"""


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(textwrap.dedent(text))
    return p


def test_load_vehicle_tam(tmp_path):
    v = load_vehicle(write(tmp_path, "v.yaml", VEHICLE))
    assert v.rigid.mass == 100.0
    assert v.hydro.buoyancy_force == pytest.approx(v.weight)
    np.testing.assert_array_equal(v.allocation.tam, np.eye(6))
    np.testing.assert_array_equal(np.diag(v.hydro.added_mass), [10, 20, 30, 1, 2, 3])


def test_load_vehicle_full_matrices(tmp_path):
    full = np.diag([10.0, 20, 30, 1, 2, 3])
    full[0, 4] = full[4, 0] = 0.5
    text = VEHICLE.replace("added_mass: [10, 20, 30, 1, 2, 3]", f"added_mass: {full.ravel().tolist()}")
    v = load_vehicle(write(tmp_path, "v.yaml", text))
    np.testing.assert_array_equal(v.hydro.added_mass, full)


def test_default_vehicle_file():
    v = default_vehicle()
    assert v.allocation.n == 8
    assert v.hydro.buoyancy_force == pytest.approx(v.weight)


@pytest.mark.parametrize("old,new,key,line", [
    ("mass: 100.0", "mass: -3", "mass", 2),
    ("inertia: [10, 12, 14]", "inertia: [10, 12]", "inertia", 3),
    ("quadratic_damping: [1, 1, 1, 1, 1, 1]", "quadratic_damping: [1, 1, x, 1, 1, 1]", "quadratic_damping", 9),
    ("max_thrust: 50", "max_thrust: 0", "max_thrust", 10),
    ("name: box", "name: box\nwingspan: 3", "wingspan", 2),
])
def test_vehicle_line_diagnostics(tmp_path, old, new, key, line):
    path = write(tmp_path, "v.yaml", VEHICLE.replace(old, new))
    with pytest.raises(ConfigError) as info:
        load_vehicle(path)
    msg = str(info.value)
    assert f"{path}:{line}" in msg
    assert key in msg


def test_vehicle_rank_deficient_tam(tmp_path):
    text = VEHICLE.replace("[0, 0, 0, 0, 0, 1]]", "[0, 0, 0, 0, 1, 0]]")
    with pytest.raises(ConfigError, match="rank"):
        load_vehicle(write(tmp_path, "v.yaml", text))


def test_vehicle_singular_mass(tmp_path):
    text = VEHICLE.replace("inertia: [10, 12, 14]", "inertia: [1e-7, 1e-7, 1e-7]").replace(
        "added_mass: [10, 20, 30, 1, 2, 3]", "added_mass: [0, 0, 0, 0, 0, 0]")
    with pytest.raises(SingularMass):
        load_vehicle(write(tmp_path, "v.yaml", text))


def test_vehicle_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_vehicle(tmp_path / "nope.yaml")


def test_invalid_yaml_reports_line(tmp_path):
    path = write(tmp_path, "v.yaml", "mass: 1\ninertia: [1, 2\n")
    with pytest.raises(ConfigError, match=f"{path}:"):
        load_vehicle(path)


# scenarios -----------------------------------------------------------------------

@pytest.mark.parametrize("name", ["forward", "negative", "positive", "obstacles"])
def test_bundled_scenarios_load(name):
    cfg = load_scenario(data_path(f"{name}.yaml"))
    np.testing.assert_array_equal(cfg.scenario.goal.pose.position, [10, 0, 0])
    m = cfg.mppi_config()
    assert (m.num_samples, m.horizon, m.inverse_temperature) == (2000, 25, 0.06)
    np.testing.assert_allclose(m.noise_std, 0.01 * cfg.vehicle.allocation.max_thrust)
    np.testing.assert_array_equal(cfg.cost().weights.q, [10, 10, 10, 100, 10, 10, 10, 10, 10, 10])


def test_bundled_variants_and_obstacles():
    assert load_scenario(data_path("negative.yaml")).scenario.buoyancy_variant == "negative"
    assert load_scenario(data_path("positive.yaml")).scenario.buoyancy_variant == "positive"
    obs = load_scenario(data_path("obstacles.yaml")).scenario.obstacles
    assert len(obs) == 2
    assert all(o.radius == 1.5 and o.half_height == 2.5 for o in obs)
    # one cylinder on each side of the straight path
    assert sorted(np.sign([o.center[1] for o in obs])) == [-1, 1]


def test_scenario_unknown_key_line(tmp_path):
    path = write(tmp_path, "s.yaml", """\
        goal: {position: [1, 0, 0]}
        controller:
          num_samples: 10
          temperature: 3
        """)
    with pytest.raises(ConfigError) as info:
        load_scenario(path)
    assert f"{path}:4" in str(info.value)
    assert "controller.temperature" in str(info.value)


def test_scenario_bad_values(tmp_path):
    cases = {
        "plant_dt: 0.03\n": "plant_dt",
        "buoyancy_variant: heavy\n": "buoyancy_variant",
        "controller: {filter: {window: 4, poly_order: 2}}\n": "window",
        "goal: {position: [1, 0]}\n": "goal.position",
        "obstacles: [{center: [1, 0, 0], radius: -1, half_height: 1}]\n": "obstacles",
    }
    for text, fragment in cases.items():
        with pytest.raises(ConfigError, match=fragment.replace(".", r"\.")):
            load_scenario(write(tmp_path, "s.yaml", text))


def test_scenario_missing_vehicle(tmp_path):
    with pytest.raises(ConfigError, match="vehicle"):
        load_scenario(write(tmp_path, "s.yaml", "vehicle: missing.yaml\n"))


def test_scenario_relative_vehicle(tmp_path):
    write(tmp_path, "v.yaml", VEHICLE)
    cfg = load_scenario(write(tmp_path, "s.yaml", "vehicle: v.yaml\n"))
    assert cfg.vehicle.rigid.mass == 100.0
    assert cfg.mppi_config().noise_std.shape == (6,)


# overrides -----------------------------------------------------------------------

def test_parse_override():
    assert parse_override("controller.num_samples=500") == ("controller.num_samples", 500)
    assert parse_override("experiment.grid=[1, 2]") == ("experiment.grid", [1, 2])
    assert parse_override("controller.filter={window: 5, poly_order: 2}") == (
        "controller.filter", {"window": 5, "poly_order": 2})
    for bad in ("controller.num_samples", "controller.samples=3", "nope=1"):
        with pytest.raises(ConfigError):
            parse_override(bad)


def test_overrides_applied():
    cfg = load_scenario(data_path("forward.yaml"), ["controller.num_samples=64", "duration=5",
                                                    "controller.noise_fraction=0.02", "buoyancy_variant=negative"])
    assert cfg.mppi_config().num_samples == 64
    assert cfg.scenario.duration == 5.0
    assert cfg.scenario.buoyancy_variant == "negative"
    np.testing.assert_allclose(cfg.mppi_config().noise_std, 0.02 * cfg.vehicle.allocation.max_thrust)


def test_override_invalid_value():
    with pytest.raises(ConfigError):
        load_scenario(data_path("forward.yaml"), ["controller.horizon=0"])


def test_apply_overrides_does_not_mutate():
    raw = apply_overrides(SCENARIO_DEFAULTS, [("controller.horizon", 3)])
    assert raw["controller"]["horizon"] == 3
    assert SCENARIO_DEFAULTS["controller"]["horizon"] == 25


def test_known_keys_cover_defaults():
    assert {"controller.num_samples", "controller.filter", "experiment.seeds", "pid.kp", "goal.position"} <= KNOWN_KEYS
