"""Plot-ready data files from an experiment output directory.

Every figure gets one plain-text file per panel. Curves are separated by
two blank lines so gnuplot can address them with ``index``; each block
starts with a ``# <curve label>`` comment and holds two columns
(time, absolute error). Images are rendered only when matplotlib is
importable and rendering was requested.
"""

from __future__ import annotations

import os
from collections import defaultdict

import numpy as np

from .errors import MissingData
from .experiments import read_rows
from .sim import TrajectoryLog

PANELS = ("x", "y", "z", "yaw")


def _errors(log: TrajectoryLog, row: dict) -> dict:
    goal = np.array([float(row["goal_x"]), float(row["goal_y"]), float(row["goal_z"])])
    w, x, y, z = log.states[:, 3:7].T
    yaw = np.arctan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z))
    eyaw = np.angle(np.exp(1j * (yaw - float(row["goal_yaw"]))))
    ep = np.abs(log.states[:, :3] - goal)
    return {"x": ep[:, 0], "y": ep[:, 1], "z": ep[:, 2], "yaw": np.abs(eyaw)}


def _curve_label(row: dict) -> str:
    exp = row["experiment"]
    if exp == "pid-compare":
        return row["controller"]
    if exp == "obstacle-course":
        return row["variant"]
    if row["param"]:
        return f"{row['param']}={row['value']}"
    return row["label"]


def _write_panel(path: str, curves: dict):
    with open(path, "w") as fh:
        for i, (label, (t, e)) in enumerate(curves.items()):
            if i:
                fh.write("\n\n")
            fh.write(f"# {label}\n")
            for a, b in zip(t, e):
                fh.write(f"{a:.6g} {b:.9g}\n")


def emit_plots(metrics_dir, render: bool = False) -> list[str]:
    """Write per-figure panel files under ``<metrics_dir>/plots``; returns the written paths.

    One curve per configuration, taken from its lowest seed. For pid-compare
    that is one curve per controller on each of the four panels.
    """
    metrics_dir = os.fspath(metrics_dir)
    metrics_path = os.path.join(metrics_dir, "metrics.csv")
    if not os.path.exists(metrics_path):
        raise MissingData(f"metrics file not found: {metrics_path}")
    rows = read_rows(metrics_path)
    if not rows:
        raise MissingData(f"metrics file has no rows: {metrics_path}")

    chosen = {}
    for row in rows:
        key = (row["experiment"], _curve_label(row))
        if key not in chosen or int(row["seed"]) < int(chosen[key]["seed"]):
            chosen[key] = row

    figures = defaultdict(lambda: {p: {} for p in PANELS})
    for (experiment, label), row in chosen.items():
        traj = os.path.join(metrics_dir, row["trajectory"])
        if not os.path.exists(traj):
            raise MissingData(f"trajectory file not found: {traj}")
        log = TrajectoryLog.from_csv(traj)
        errs = _errors(log, row)
        for p in PANELS:
            figures[experiment][p][label] = (log.times, errs[p])

    out_dir = os.path.join(metrics_dir, "plots")
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for experiment, panels in sorted(figures.items()):
        for p in PANELS:
            path = os.path.join(out_dir, f"{experiment}_{p}.dat")
            _write_panel(path, panels[p])
            written.append(path)
    if render:
        written += _render(out_dir, figures)
    return written


def _render(out_dir, figures) -> list[str]:
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return []
    paths = []
    for experiment, panels in sorted(figures.items()):
        fig, axes = plt.subplots(len(PANELS), 1, sharex=True, figsize=(7, 9))
        for ax, p in zip(axes, PANELS):
            for label, (t, e) in panels[p].items():
                ax.plot(t, e, label=label, lw=1)
            ax.set_ylabel(f"|error {p}|")
        axes[0].legend(fontsize="small")
        axes[-1].set_xlabel("time [s]")
        fig.suptitle(experiment)
        path = os.path.join(out_dir, f"{experiment}.png")
        fig.savefig(path, dpi=100)
        plt.close(fig)
        paths.append(path)
    return paths
