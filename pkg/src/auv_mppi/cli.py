"""Command line entry point: ``auv-mppi run`` and ``auv-mppi plots``."""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .config import data_path, load_scenario
from .errors import AuvMppiError, ConfigError, MissingData, NonFiniteState, PlantDiverged
from .experiments import EXPERIMENTS, WORKERS_ENV, run_experiment
from .plots import emit_plots

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DIVERGED = 2
EXIT_INTERRUPTED = 130

log = logging.getLogger("auv_mppi")


def _scenario_path(value: str) -> str:
    # bare names refer to the scenarios shipped with the package
    if not os.path.exists(value) and os.sep not in value:
        candidate = data_path(value if value.endswith(".yaml") else f"{value}.yaml")
        if os.path.exists(candidate):
            return candidate
    return value


class _Parser(argparse.ArgumentParser):
    # usage errors count as configuration errors; exit code 2 is reserved for divergence
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="auv-mppi", description="MPPI control of a 6-DOF underwater vehicle.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run an experiment",
                         epilog=f"Set {WORKERS_ENV}=N to spread runs over N processes and "
                                "AUV_MPPI_THREADS=N to cap rollout threads per process.")
    run.add_argument("--experiment", required=True, choices=EXPERIMENTS)
    run.add_argument("--scenario", required=True,
                     help="scenario YAML file, or one of the bundled names: forward, negative, positive, obstacles")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                     help="override a scenario key, e.g. controller.num_samples=500 (repeatable)")
    run.add_argument("--seed", type=int, default=0, help="first seed; further seeds count up from it")
    run.add_argument("-q", "--quiet", action="store_true")

    plots = sub.add_parser("plots", help="write plot data files from an output directory")
    plots.add_argument("metrics_dir")
    plots.add_argument("--render", action="store_true", help="also render PNGs when matplotlib is available")
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if getattr(args, "quiet", False) else logging.INFO,
                        format="%(message)s")

    if args.command == "plots":
        try:
            paths = emit_plots(args.metrics_dir, render=args.render)
        except MissingData as exc:
            log.error("error: %s", exc)
            return EXIT_CONFIG
        log.info("wrote %d plot files to %s", len(paths), os.path.join(args.metrics_dir, "plots"))
        return EXIT_OK

    try:
        cfg = load_scenario(_scenario_path(args.scenario), args.overrides)
        rows = run_experiment(args.experiment, cfg, args.out, seed=args.seed, overrides=args.overrides,
                              argv=["auv-mppi", *argv], log=log.info)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (PlantDiverged, NonFiniteState) as exc:
        log.error("runtime divergence: %s", exc)
        return EXIT_DIVERGED
    except KeyboardInterrupt:
        log.error("interrupted; completed runs are kept in %s", args.out)
        return EXIT_INTERRUPTED
    except AuvMppiError as exc:
        log.error("error: %s", exc)
        return EXIT_CONFIG
    log.info("%d runs written to %s (metrics.csv, summary.txt, manifest.json)", len(rows), args.out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
