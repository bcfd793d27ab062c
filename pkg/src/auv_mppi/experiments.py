"""Experiment planning and execution behind the command line.

An experiment expands into a list of independent runs (grid point x seed x
controller x buoyancy variant). Each run writes its trajectory CSV and
returns one metrics row; rows are appended to ``metrics.csv`` as soon as a
run finishes so an interrupted sweep keeps everything completed so far.
"""

from __future__ import annotations

import csv
import json
import math
import os
import subprocess
import sys
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field, replace

import numpy as np

from . import __version__
from .baselines import WrenchController
from .config import ExperimentConfig
from .errors import ConfigError, PlantDiverged
from .mppi import MppiController
from .sim import METRIC_COLUMNS, VARIANTS, TrajectoryLog, apply_variant, compute_metrics, cruise_mask, run_episode
from .sim import write_csv_atomic

EXPERIMENTS = ("sweep-K", "sweep-horizon", "sweep-sigma", "filter-study", "timing", "pid-compare",
               "obstacle-course", "single-run")

DEFAULT_GRIDS = {
    "sweep-K": ("num_samples", (250, 500, 1000, 2000, 3000)),
    "sweep-horizon": ("horizon", (10, 15, 25, 35, 50)),
    "sweep-sigma": ("noise_fraction", (0.0025, 0.005, 0.01, 0.02, 0.05)),
    "filter-study": ("filter", ("off", "5x2")),
    "timing": ("num_samples", (250, 500, 1000, 2000, 3000)),
}

HEALTH_BAND = (0.01, 0.10)
WORKERS_ENV = "AUV_MPPI_WORKERS"

ROW_COLUMNS = ("experiment", "label", "controller", "variant", "param", "value", "seed", "status",
               *METRIC_COLUMNS, "mean_step_ms", "eta_health", "median_eta_over_K", "command_jitter",
               "goal_x", "goal_y", "goal_z", "goal_yaw", "trajectory")


@dataclass(frozen=True)
class RunSpec:
    experiment: str
    label: str
    controller: str = "mppi"
    seed: int = 0
    variant: str = "neutral"
    param: str = ""
    value: object = ""
    changes: tuple = field(default_factory=tuple)
    duration: float | None = None


def _filter_change(value):
    if value in ("off", None):
        return None
    window, order = (int(v) for v in str(value).split("x"))
    return {"window": window, "poly_order": order}


def _grid_change(param, value):
    if param == "filter":
        return (("filter", _filter_change(value)),)
    if param == "noise_fraction":
        return (("noise_fraction", float(value)), ("noise_std", None))
    return ((param, int(value)),)


def plan_runs(kind: str, cfg: ExperimentConfig, seed: int = 0) -> list[RunSpec]:
    """Expand an experiment kind into individual runs."""
    if kind not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {kind!r}; choose from {', '.join(EXPERIMENTS)}")
    exp = cfg.raw["experiment"]
    n_seeds = int(exp["seeds"])
    if n_seeds < 1:
        raise ConfigError("experiment.seeds must be at least 1")
    seeds = [seed + i for i in range(n_seeds)]
    variant = cfg.scenario.buoyancy_variant

    if kind == "single-run":
        return [RunSpec(kind, f"mppi_{variant}_s{seed}", seed=seed, variant=variant)]
    if kind == "pid-compare":
        runs = [RunSpec(kind, f"mppi_{variant}_s{s}", seed=s, variant=variant) for s in seeds]
        runs += [RunSpec(kind, f"{c}_{variant}", controller=c, variant=variant) for c in ("pid", "cascade")]
        return runs
    if kind == "obstacle-course":
        return [RunSpec(kind, f"mppi_{v}_s{s}", seed=s, variant=v) for v in VARIANTS for s in seeds]

    param, grid = DEFAULT_GRIDS[kind]
    if exp["grid"] is not None:
        grid = exp["grid"] if isinstance(exp["grid"], (list, tuple)) else [exp["grid"]]
    if kind == "timing":
        steps = int(exp["timing_steps"])
        if steps < 1:
            raise ConfigError("experiment.timing_steps must be at least 1")
        duration = steps * cfg.scenario.control_dt
        return [RunSpec(kind, f"{param}-{v}_s{seed}", seed=seed, variant=variant, param=param, value=v,
                        changes=_grid_change(param, v), duration=duration) for v in grid]
    return [RunSpec(kind, f"{param}-{v}_s{s}", seed=s, variant=variant, param=param, value=v,
                    changes=_grid_change(param, v)) for v in grid for s in seeds]


def build_controller(run: RunSpec, cfg: ExperimentConfig):
    if run.controller == "mppi":
        return MppiController(cfg.vehicle, cfg.cost(), cfg.mppi_config(run.seed, **dict(run.changes)),
                              cfg.scenario.disturbance)
    gains = cfg.pid_gains() if run.controller == "pid" else cfg.cascade_gains()
    return WrenchController(run.controller, cfg.vehicle.allocation, cfg.scenario.goal,
                            cfg.scenario.control_dt, gains)


def scenario_for(run: RunSpec, cfg: ExperimentConfig):
    sc = replace(cfg.scenario, buoyancy_variant=run.variant)
    if run.duration is not None:
        sc = replace(sc, duration=run.duration)
    return sc


def eta_health(log: TrajectoryLog, scenario) -> float:
    """Fraction of cruise-phase steps whose eta/K lies inside the healthy band."""
    ek = log.diagnostics["eta_over_K"]
    mask = cruise_mask(log, scenario) & np.isfinite(ek)
    if not mask.any():
        return math.nan
    lo, hi = HEALTH_BAND
    return float(np.mean((ek[mask] >= lo) & (ek[mask] <= hi)))


def command_jitter(log: TrajectoryLog) -> float:
    """Mean absolute first difference of the commanded thrusts."""
    if len(log) < 2:
        return math.nan
    return float(np.abs(np.diff(log.commands, axis=0)).mean())


def metrics_row(run: RunSpec, log: TrajectoryLog, scenario, status: str, trajectory: str) -> dict:
    row = {"experiment": run.experiment, "label": run.label, "controller": run.controller,
           "variant": run.variant, "param": run.param, "value": run.value, "seed": run.seed, "status": status}
    row.update(compute_metrics(log, scenario).as_dict())
    # the first step includes kernel compilation or cache loading
    wall = log.diagnostics["wall_time_ms"][1:]
    wall = wall[np.isfinite(wall)]
    ek = log.diagnostics["eta_over_K"]
    mask = cruise_mask(log, scenario) & np.isfinite(ek)
    row["mean_step_ms"] = float(wall.mean()) if wall.size else math.nan
    row["eta_health"] = eta_health(log, scenario)
    row["median_eta_over_K"] = float(np.median(ek[mask])) if mask.any() else math.nan
    row["command_jitter"] = command_jitter(log)
    g = scenario.goal
    row.update(goal_x=g.pose.position[0], goal_y=g.pose.position[1], goal_z=g.pose.position[2],
               goal_yaw=g.pose.orientation.yaw(), trajectory=trajectory)
    return row


def execute(run: RunSpec, cfg: ExperimentConfig, out_dir: str) -> dict:
    """Run one episode, write its trajectory and return its metrics row.

    On divergence the partial trajectory is still written and the row is
    returned with status ``diverged``.
    """
    scenario = scenario_for(run, cfg)
    plant = apply_variant(cfg.vehicle, run.variant)
    controller = build_controller(run, cfg)
    rel = os.path.join("runs", run.experiment, f"{run.label}.csv")
    path = os.path.join(out_dir, rel)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    try:
        log = run_episode(controller, scenario, plant)
        status = "ok"
    except PlantDiverged as exc:
        log, status = exc.log, "diverged"
    log.to_csv(path)
    return metrics_row(run, log, scenario, status, rel)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def append_row(path: str, row: dict):
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(ROW_COLUMNS)
        w.writerow([_fmt(row.get(c, "")) for c in ROW_COLUMNS])
        fh.flush()
        os.fsync(fh.fileno())


def read_rows(path: str) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def worker_count() -> int:
    env = os.environ.get(WORKERS_ENV)
    if not env:
        return 1
    try:
        n = int(env)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {env!r}") from None
    return max(1, n)


def version_string() -> str:
    """Package version, with ``git describe`` appended when run from a checkout."""
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_manifest(out_dir: str, kind: str, cfg: ExperimentConfig, seed: int, overrides, argv, runs):
    manifest = {
        "argv": list(argv),
        "experiment": kind,
        "scenario": os.path.abspath(cfg.source),
        "overrides": list(overrides),
        "seed": seed,
        "version": version_string(),
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "vehicle_checksum": cfg.vehicle.checksum(),
        "resolved_config": cfg.raw,
        "runs": [run.label for run in runs],
    }
    tmp = os.path.join(out_dir, ".manifest.json.tmp")
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=2, default=str)
    os.replace(tmp, os.path.join(out_dir, "manifest.json"))
    return manifest


def _as_float(v):
    try:
        return float(v)
    except (TypeError, ValueError):
        return math.nan


def summarize(rows: list[dict]) -> list[dict]:
    """Median metrics per configuration, ranked by steady-state position error then settling time."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        key = (r["experiment"], r["controller"], r["variant"], r["param"], str(r["value"]))
        groups.setdefault(key, []).append(r)
    table = []
    for (experiment, controller, variant, param, value), rs in groups.items():
        ss = [math.sqrt(sum(_as_float(r[f"ss_{a}"]) ** 2 for a in "xyz")) for r in rs]
        entry = {
            "experiment": experiment, "controller": controller, "variant": variant, "param": param,
            "value": value, "runs": len(rs),
            "median_ss_position": float(np.median(ss)),
            "median_settling_time": float(np.median([_as_float(r["settling_time"]) for r in rs])),
            "median_overshoot_pct": float(np.median([_as_float(r["overshoot_pct"]) for r in rs])),
            "success_rate": float(np.mean([_as_float(r["goal_reached"]) == 1 and _as_float(r["collision_count"]) == 0
                                           for r in rs])),
            "mean_step_ms": float(np.nanmean([_as_float(r["mean_step_ms"]) for r in rs]))
            if any(np.isfinite(_as_float(r["mean_step_ms"])) for r in rs) else math.nan,
        }
        table.append(entry)
    table.sort(key=lambda e: (e["median_ss_position"], e["median_settling_time"]))
    for i, e in enumerate(table, 1):
        e["rank"] = i
    return table


SUMMARY_COLUMNS = ("rank", "experiment", "controller", "variant", "param", "value", "runs", "median_ss_position",
                   "median_settling_time", "median_overshoot_pct", "success_rate", "mean_step_ms")


def format_table(table: list[dict]) -> str:
    cells = [[str(c) for c in SUMMARY_COLUMNS]]
    for e in table:
        cells.append([f"{e[c]:.4g}" if isinstance(e[c], float) else str(e[c]) for c in SUMMARY_COLUMNS])
    widths = [max(len(row[i]) for row in cells) for i in range(len(SUMMARY_COLUMNS))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def write_summary(out_dir: str, rows: list[dict]) -> list[dict]:
    table = summarize(rows)
    write_csv_atomic(os.path.join(out_dir, "summary.csv"), SUMMARY_COLUMNS,
                     [[e[c] for c in SUMMARY_COLUMNS] for e in table])
    tmp = os.path.join(out_dir, ".summary.txt.tmp")
    with open(tmp, "w") as fh:
        fh.write(format_table(table))
    os.replace(tmp, os.path.join(out_dir, "summary.txt"))
    return table


def run_experiment(kind: str, cfg: ExperimentConfig, out_dir: str, seed: int = 0, overrides=(), argv=(),
                   log=print) -> list[dict]:
    """Run every planned episode, appending metrics as they complete.

    Returns the metrics rows of this invocation. Raises PlantDiverged after
    all runs finished if any of them diverged (the rows are kept on disk).
    """
    runs = plan_runs(kind, cfg, seed)
    os.makedirs(out_dir, exist_ok=True)
    write_manifest(out_dir, kind, cfg, seed, overrides, argv, runs)
    metrics_path = os.path.join(out_dir, "metrics.csv")
    rows = []
    workers = min(worker_count(), len(runs))

    def done(row):
        append_row(metrics_path, row)
        rows.append(row)
        log(f"[{len(rows)}/{len(runs)}] {row['label']}: status={row['status']} "
            f"final_error={row['final_position_error']:.3f} m settling={row['settling_time']:.1f} s")

    try:
        if workers <= 1:
            for run in runs:
                done(execute(run, cfg, out_dir))
        else:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(execute, run, cfg, out_dir) for run in runs]
                for fut in as_completed(futures):
                    done(fut.result())
    finally:
        if rows:
            write_summary(out_dir, read_rows(metrics_path))
    diverged = [r["label"] for r in rows if r["status"] == "diverged"]
    if diverged:
        raise PlantDiverged(f"plant diverged in {len(diverged)} run(s): {', '.join(diverged)}")
    return rows
