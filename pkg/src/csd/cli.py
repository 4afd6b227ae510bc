"""Command-line entry point.

    csd run <config.json> [--seed N] [--out DIR]
    csd check
    csd plot <metrics.csv> [--out DIR]

Exit codes: 0 success, 2 invalid config, 3 numeric abort.
"""
from __future__ import annotations

import argparse
import sys

from . import harness


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="csd", description="particle-coupled score distillation experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment config")
    p_run.add_argument("config", help="path to a JSON experiment config")
    p_run.add_argument("--seed", type=int, default=None, help="override the config's seed")
    p_run.add_argument("--out", default=None, help="override the config's output_dir")

    sub.add_parser("check", help="run the fast invariant self-test battery")

    p_plot = sub.add_parser("plot", help="emit per-metric (step, value) series from a metrics.csv")
    p_plot.add_argument("metrics", help="path to a metrics.csv written by `csd run`")
    p_plot.add_argument("--out", default=None, help="directory for the series files")

    args = parser.parse_args(argv)
    if args.command == "run":
        return harness.run(args.config, seed=args.seed, out=args.out)
    if args.command == "check":
        return 0 if harness.run_checks() else 1
    try:
        written = harness.emit_plotdata(args.metrics, out_dir=args.out)
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    for path in written:
        print(path)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
