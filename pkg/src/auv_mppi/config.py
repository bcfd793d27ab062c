"""YAML vehicle and scenario files.

Errors carry the file name and line of the offending key. Scenario files
can be adjusted with dotted ``key=value`` overrides; unknown keys are
rejected so a typo never silently runs the defaults.
"""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass
from importlib import resources

import numpy as np
import yaml

from .baselines import PAPER_CASCADE, PAPER_PID, CascadeGains, PidGains
from .costs import PAPER_Q, CostWeights, CylinderObstacle, GoalSpec, WaypointCost
from .dynamics import HydroParams, RigidBodyParams, ThrusterAllocation, VehicleModel, VehicleState
from .errors import AuvMppiError, ConfigError
from .lie import Pose, UnitQuaternion
from .mppi import MppiConfig, SavgolFilter
from .sim import Scenario

VEHICLE_KEYS = {"name", "mass", "inertia", "cog", "cob", "added_mass", "linear_damping", "quadratic_damping",
                "buoyancy_force", "tam", "thrusters", "max_thrust", "gravity"}

SCENARIO_DEFAULTS = {
    "name": "scenario",
    "vehicle": "default",
    "goal": {"position": [10.0, 0.0, 0.0], "yaw": 0.0, "velocity": [0.0] * 6},
    "initial": {"position": [0.0, 0.0, 0.0], "yaw": 0.0, "velocity": [0.0] * 6},
    "buoyancy_variant": "neutral",
    "duration": 90.0,
    "control_dt": 0.1,
    "plant_dt": 0.02,
    "disturbance": None,
    "collision_margin": 1.0,
    "goal_tolerance": 1.0,
    "obstacles": [],
    "controller": {
        "num_samples": 2000,
        "horizon": 25,
        "noise_fraction": 0.01,
        "noise_std": None,
        "inverse_temperature": 0.06,
        "filter": None,
        "control_cost": "none",
        "tail_init": "copy",
        "cost_weights": list(PAPER_Q),
        "squared_cost": False,
        "engine": "compiled",
        "workers": 0,
    },
    "pid": {"kp": PAPER_PID.kp.tolist(), "ki": PAPER_PID.ki.tolist(), "kd": PAPER_PID.kd.tolist(),
            "integral_limit": PAPER_PID.integral_limit.tolist()},
    "cascade": {
        "position": {"kp": PAPER_CASCADE.position.kp.tolist(), "ki": PAPER_CASCADE.position.ki.tolist(),
                     "kd": PAPER_CASCADE.position.kd.tolist(),
                     "integral_limit": PAPER_CASCADE.position.integral_limit.tolist()},
        "velocity": {"kp": PAPER_CASCADE.velocity.kp.tolist(), "ki": PAPER_CASCADE.velocity.ki.tolist(),
                     "kd": PAPER_CASCADE.velocity.kd.tolist(),
                     "integral_limit": PAPER_CASCADE.velocity.integral_limit.tolist()},
    },
    "experiment": {"seeds": 5, "grid": None, "timing_steps": 50},
}

# keys whose value is free-form (a mapping or list given whole)
_OPAQUE = {"disturbance", "obstacles", "controller.filter", "controller.noise_std", "experiment.grid"}
_FILTER_KEYS = {"window", "poly_order"}


class _Located:
    """Parsed YAML mapping that remembers the line of every key."""

    def __init__(self, text: str, source: str):
        self.source = source
        try:
            node = yaml.compose(text)
            self.data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            where = f"{source}:{mark.line + 1}" if mark is not None else source
            raise ConfigError(f"{where}: invalid YAML ({getattr(exc, 'problem', exc)})") from None
        if self.data is None:
            self.data = {}
        if not isinstance(self.data, dict) or not isinstance(node, yaml.MappingNode):
            raise ConfigError(f"{source}: top level must be a mapping")
        self.lines = {}
        self._index(node, "")

    def _index(self, node, prefix):
        for k, v in node.value:
            key = f"{prefix}{k.value}"
            self.lines[key] = k.start_mark.line + 1
            if isinstance(v, yaml.MappingNode):
                self._index(v, key + ".")

    def where(self, key: str) -> str:
        line = self.lines.get(key)
        return f"{self.source}:{line}" if line else self.source

    def error(self, key: str, message: str) -> ConfigError:
        return ConfigError(f"{self.where(key)}: {key}: {message}")


def _read(path) -> _Located:
    path = os.fspath(path)
    if not os.path.exists(path):
        raise ConfigError(f"{path}: file not found")
    with open(path) as fh:
        return _Located(fh.read(), path)


def data_path(name: str) -> str:
    """Path of a file shipped in the package data directory."""
    return str(resources.files("auv_mppi") / "data" / name)


def _array(doc: _Located, key: str, value, sizes: dict):
    """Coerce ``value`` to one of the allowed shapes.

    ``sizes`` maps an element count to a builder taking the flat array.
    """
    try:
        a = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise doc.error(key, "expected a list of numbers") from None
    flat = a.reshape(-1)
    if flat.size not in sizes:
        allowed = " or ".join(str(s) for s in sorted(sizes))
        raise doc.error(key, f"expected {allowed} numbers, got {flat.size}")
    if not np.all(np.isfinite(flat)):
        raise doc.error(key, "entries must be finite")
    return sizes[flat.size](flat)


def _number(doc: _Located, key: str, value, positive=False, allow_zero=True) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise doc.error(key, f"expected a number, got {value!r}")
    value = float(value)
    if not np.isfinite(value):
        raise doc.error(key, "must be finite")
    if positive and not (value > 0 or (allow_zero and value == 0)):
        raise doc.error(key, "must be positive" if not allow_zero else "must be non-negative")
    return value


def _square(n):
    return {n: lambda f: np.diag(f), n * n: lambda f: f.reshape(n, n)}


# ---------------------------------------------------------------------------
# vehicle
# ---------------------------------------------------------------------------

def load_vehicle(path) -> VehicleModel:
    """Vehicle parameters from YAML.

    Matrices accept either the full row-major list or the diagonal only.
    The allocation is given as ``tam`` (6 rows) or as a ``thrusters`` list of
    ``{position, direction}`` entries. ``buoyancy_force: neutral`` sets the
    buoyancy equal to the weight.
    """
    doc = _read(path)
    return vehicle_from_doc(doc)


def vehicle_from_doc(doc: _Located) -> VehicleModel:
    d = doc.data
    unknown = set(d) - VEHICLE_KEYS
    if unknown:
        key = sorted(unknown)[0]
        raise doc.error(key, f"unknown vehicle field (known: {', '.join(sorted(VEHICLE_KEYS))})")
    for key in ("mass", "inertia", "added_mass", "linear_damping", "quadratic_damping", "max_thrust"):
        if key not in d:
            raise ConfigError(f"{doc.source}: missing required vehicle field {key!r}")
    if ("tam" in d) == ("thrusters" in d):
        raise ConfigError(f"{doc.source}: give exactly one of 'tam' or 'thrusters'")

    gravity = _number(doc, "gravity", d.get("gravity", 9.81), positive=True, allow_zero=False)
    mass = _number(doc, "mass", d["mass"], positive=True, allow_zero=False)
    vec3 = {3: lambda f: f}
    inertia = _array(doc, "inertia", d["inertia"], _square(3))
    cog = _array(doc, "cog", d.get("cog", [0, 0, 0]), vec3)
    try:
        rigid = RigidBodyParams(mass, inertia, cog)
    except AuvMppiError as exc:
        raise doc.error("inertia", str(exc)) from None

    buoyancy = d.get("buoyancy_force", "neutral")
    if buoyancy == "neutral":
        buoyancy = mass * gravity
    else:
        buoyancy = _number(doc, "buoyancy_force", buoyancy, positive=True)
    fields = {
        "added_mass": _array(doc, "added_mass", d["added_mass"], _square(6)),
        "linear_damping": _array(doc, "linear_damping", d["linear_damping"], _square(6)),
        "quadratic_damping": _array(doc, "quadratic_damping", d["quadratic_damping"], {6: lambda f: f}),
        "cob": _array(doc, "cob", d.get("cob", [0, 0, 0]), vec3),
    }
    try:
        hydro = HydroParams(buoyancy_force=buoyancy, **fields)
    except AuvMppiError as exc:
        # HydroParams messages start with the field name
        key = next((k for k in fields if str(exc).startswith(k)), "added_mass")
        raise doc.error(key, str(exc)) from None

    max_thrust = _number(doc, "max_thrust", d["max_thrust"], positive=True, allow_zero=False)
    key = "tam" if "tam" in d else "thrusters"
    if key == "tam":
        try:
            tam = np.asarray(d["tam"], dtype=float)
        except (TypeError, ValueError):
            raise doc.error("tam", "expected 6 rows of numbers") from None
        if tam.ndim != 2 or tam.shape[0] != 6:
            raise doc.error("tam", f"expected 6 rows, got shape {tam.shape}")
    else:
        thr = d["thrusters"]
        if not isinstance(thr, list) or not thr:
            raise doc.error("thrusters", "expected a non-empty list")
        pos, dirs = [], []
        for i, t in enumerate(thr):
            if not isinstance(t, dict) or set(t) != {"position", "direction"}:
                raise doc.error("thrusters", f"entry {i} needs exactly 'position' and 'direction'")
            pos.append(_array(doc, "thrusters", t["position"], vec3))
            dirs.append(_array(doc, "thrusters", t["direction"], vec3))
            if np.linalg.norm(dirs[-1]) == 0:
                raise doc.error("thrusters", f"entry {i} has a zero direction")
        dirs = np.asarray(dirs) / np.linalg.norm(dirs, axis=1, keepdims=True)
        tam = np.vstack((dirs.T, np.cross(pos, dirs).T))
    try:
        alloc = ThrusterAllocation(tam, max_thrust)
    except AuvMppiError as exc:
        raise doc.error(key, str(exc)) from None
    model = VehicleModel(rigid, hydro, alloc, gravity)
    model.mass_inverse  # raises SingularMass early
    return model


# ---------------------------------------------------------------------------
# scenario
# ---------------------------------------------------------------------------

def _known_keys(tree, prefix=""):
    out = set()
    for k, v in tree.items():
        key = prefix + k
        out.add(key)
        if isinstance(v, dict) and key not in _OPAQUE:
            out |= _known_keys(v, key + ".")
    return out


KNOWN_KEYS = frozenset(_known_keys(SCENARIO_DEFAULTS))


def _merge(base: dict, update: dict, doc: _Located | None, prefix=""):
    for k, v in update.items():
        key = prefix + str(k)
        if key not in KNOWN_KEYS:
            msg = "unknown scenario key"
            raise doc.error(key, msg) if doc else ConfigError(f"{key}: {msg}")
        if isinstance(v, dict) and isinstance(base.get(k), dict) and key not in _OPAQUE:
            _merge(base[k], v, doc, key + ".")
        else:
            base[k] = v


def parse_override(text: str):
    """'a.b=value' -> ('a.b', parsed value). Values are read as YAML scalars or lists."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if key not in KNOWN_KEYS:
        raise ConfigError(f"override {key!r} does not name a known config key")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError:
        raise ConfigError(f"override {key!r}: cannot parse value {raw!r}") from None
    return key, value


def apply_overrides(raw: dict, overrides) -> dict:
    raw = copy.deepcopy(raw)
    for item in overrides:
        key, value = parse_override(item) if isinstance(item, str) else item
        if key not in KNOWN_KEYS:
            raise ConfigError(f"override {key!r} does not name a known config key")
        node = raw
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return raw


@dataclass
class ExperimentConfig:
    """Everything needed to build controllers and run episodes for one scenario."""

    raw: dict
    vehicle: VehicleModel
    scenario: Scenario
    source: str

    @property
    def controller(self) -> dict:
        return self.raw["controller"]

    def mppi_config(self, seed: int = 0, **changes) -> MppiConfig:
        c = dict(self.controller)
        c.update(changes)
        filt = c["filter"]
        if filt is not None:
            if not isinstance(filt, dict) or set(filt) - _FILTER_KEYS:
                raise ConfigError("controller.filter must be a mapping with window and poly_order")
            filt = SavgolFilter(int(filt.get("window", 5)), int(filt.get("poly_order", 2)))
        n = self.vehicle.allocation.n
        if c["noise_std"] is not None:
            sigma = np.broadcast_to(np.asarray(c["noise_std"], dtype=float), (n,))
        else:
            frac = float(c["noise_fraction"])
            if not frac > 0:
                raise ConfigError("controller.noise_fraction must be positive")
            sigma = np.full(n, frac * self.vehicle.allocation.max_thrust)
        return MppiConfig(noise_std=sigma, num_samples=int(c["num_samples"]), horizon=int(c["horizon"]),
                          inverse_temperature=float(c["inverse_temperature"]), filter=filt, seed=int(seed),
                          dt=self.scenario.control_dt, control_cost=c["control_cost"],
                          tail_init=c["tail_init"], workers=int(c["workers"]), engine=c["engine"])

    def cost(self) -> WaypointCost:
        return WaypointCost(self.scenario.goal, CostWeights(self.controller["cost_weights"]),
                            self.scenario.obstacles, self.scenario.collision_margin,
                            bool(self.controller["squared_cost"]))

    def pid_gains(self) -> PidGains:
        return PidGains(**self.raw["pid"])

    def cascade_gains(self) -> CascadeGains:
        c = self.raw["cascade"]
        return CascadeGains(PidGains(**c["position"]), PidGains(**c["velocity"]))


def _pose(doc, key, spec) -> Pose:
    if not isinstance(spec, dict):
        raise doc.error(key, "expected a mapping with position and yaw")
    pos = _array(doc, f"{key}.position", spec.get("position", [0, 0, 0]), {3: lambda f: f})
    yaw = _number(doc, f"{key}.yaw", spec.get("yaw", 0.0))
    return Pose(pos, UnitQuaternion.from_yaw(yaw))


def _resolve_vehicle(ref, doc: _Located) -> VehicleModel:
    if ref == "default":
        path = data_path("vehicle_default.yaml")
    else:
        path = ref if os.path.isabs(ref) else os.path.join(os.path.dirname(doc.source) or ".", ref)
    if not os.path.exists(path):
        raise doc.error("vehicle", f"vehicle file {path!r} not found")
    return load_vehicle(path)


def build_experiment(raw: dict, doc: _Located, vehicle: VehicleModel | None = None) -> ExperimentConfig:
    if vehicle is None:
        vehicle = _resolve_vehicle(raw["vehicle"], doc)
    goal_spec = raw["goal"]
    goal = GoalSpec(_pose(doc, "goal", goal_spec),
                    _array(doc, "goal.velocity", goal_spec.get("velocity", [0.0] * 6), {6: lambda f: f}))
    init_spec = raw["initial"]
    initial = VehicleState(_pose(doc, "initial", init_spec),
                           _array(doc, "initial.velocity", init_spec.get("velocity", [0.0] * 6), {6: lambda f: f}))
    obstacles = []
    for i, ob in enumerate(raw["obstacles"] or []):
        if not isinstance(ob, dict) or set(ob) != {"center", "radius", "half_height"}:
            raise doc.error("obstacles", f"entry {i} needs exactly center, radius and half_height")
        try:
            obstacles.append(CylinderObstacle(_array(doc, "obstacles", ob["center"], {3: lambda f: f}),
                                              _number(doc, "obstacles", ob["radius"]),
                                              _number(doc, "obstacles", ob["half_height"])))
        except ConfigError as exc:
            if str(exc).startswith(doc.source):
                raise
            raise doc.error("obstacles", f"entry {i}: {exc}") from None
    disturbance = raw["disturbance"]
    if disturbance is not None:
        disturbance = _array(doc, "disturbance", disturbance, {6: lambda f: f})
    try:
        scenario = Scenario(goal=goal, initial=initial, buoyancy_variant=raw["buoyancy_variant"],
                            obstacles=obstacles,
                            duration=_number(doc, "duration", raw["duration"]),
                            control_dt=_number(doc, "control_dt", raw["control_dt"]),
                            plant_dt=_number(doc, "plant_dt", raw["plant_dt"]),
                            disturbance=disturbance,
                            collision_margin=_number(doc, "collision_margin", raw["collision_margin"], positive=True),
                            goal_tolerance=_number(doc, "goal_tolerance", raw["goal_tolerance"], positive=True),
                            name=str(raw["name"]))
    except ConfigError as exc:
        if str(exc).startswith(doc.source):
            raise
        key = next((k for k in ("buoyancy_variant", "duration", "plant_dt") if k in str(exc)), "duration")
        raise doc.error(key, str(exc)) from None
    cfg = ExperimentConfig(raw, vehicle, scenario, doc.source)
    # surface controller and gain errors at load time
    try:
        cfg.mppi_config()
        cfg.pid_gains()
        cfg.cascade_gains()
        cfg.cost()
    except (ConfigError, TypeError, ValueError) as exc:
        raise ConfigError(f"{doc.source}: {exc}") from None
    return cfg


def load_scenario(path, overrides=(), vehicle: VehicleModel | None = None) -> ExperimentConfig:
    """Read a scenario file, fill defaults, apply ``key=value`` overrides and validate."""
    doc = _read(path)
    raw = copy.deepcopy(SCENARIO_DEFAULTS)
    _merge(raw, doc.data, doc)
    raw = apply_overrides(raw, overrides)
    return build_experiment(raw, doc, vehicle)


def default_vehicle() -> VehicleModel:
    return load_vehicle(data_path("vehicle_default.yaml"))
