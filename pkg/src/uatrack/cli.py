"""Command-line entry point.

Subcommands:
  simulate   render one seed of a scenario to replay + truth logs
  track      run a tracker, writing track logs only
  evaluate   score a track log against a truth log
  run        simulate + track + evaluate over all seeds
  compare    improvement table between two finished runs
  plot-data  CSV series (likelihood curves, track counts, LR traces)

Exit codes: 0 success, 1 configuration error, 2 input-data error,
3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import json
import sys

from .harness import (ConfigError, InvariantError, compare, emit_plot_data,
                      load_config, read_truth_log, run, simulate)
from .metrics import evaluate_sequence, write_report
from .output_frame import read_track_log
from .scenario import InputDataError


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--tracker", choices=("uncertainty", "baseline", "grid"))
    p.add_argument("--seed", type=int, help="single seed (overrides config)")
    p.add_argument("--seeds", help="comma-separated seed list (overrides config)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--replay", help="replay log instead of simulating")


def _config_from_args(args: argparse.Namespace):
    overrides: dict = {}
    if args.tracker:
        overrides["tracker"] = args.tracker
    if args.seeds is not None:
        overrides["seeds"] = [int(s) for s in args.seeds.split(",") if s.strip()]
    elif args.seed is not None:
        overrides["seeds"] = [args.seed]
    if args.out:
        overrides["out"] = args.out
    if args.replay:
        overrides["replay"] = args.replay
        overrides["scenario"] = None
    return load_config(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uatrack",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="render a scenario seed to logs")
    p.add_argument("--config", required=True, help="scenario JSON file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("track", help="run a tracker without evaluating")
    _add_run_flags(p)

    p = sub.add_parser("evaluate", help="score a track log against truth")
    p.add_argument("--truth", required=True)
    p.add_argument("--hyp", required=True)
    p.add_argument("--out", help="write the report here instead of stdout")

    p = sub.add_parser("run", help="simulate + track + evaluate all seeds")
    _add_run_flags(p)

    p = sub.add_parser("compare", help="improvement of run A over run B")
    p.add_argument("run_a")
    p.add_argument("run_b")

    p = sub.add_parser("plot-data", help="emit CSV plot series for a run")
    p.add_argument("run_dir")
    return parser


def _dispatch(args: argparse.Namespace) -> int:
    if args.command == "simulate":
        simulate(args.config, args.seed, args.out)
        print(f"wrote logs to {args.out}")
    elif args.command in ("track", "run"):
        config = _config_from_args(args)
        summary = run(config, evaluate=args.command == "run")
        if summary.means:
            print(json.dumps(summary.means, sort_keys=True))
        print(f"artifacts in {summary.out_dir}")
    elif args.command == "evaluate":
        hyp = read_track_log(args.hyp)
        truth = read_truth_log(args.truth)
        report = evaluate_sequence(hyp, truth)
        if args.out:
            write_report(args.out, report)
        print(json.dumps(report.to_dict(), sort_keys=True))
    elif args.command == "compare":
        print(json.dumps(compare(args.run_a, args.run_b), sort_keys=True, indent=2))
    elif args.command == "plot-data":
        for path in emit_plot_data(args.run_dir):
            print(path)
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except InputDataError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 2
    except (InvariantError, Exception) as exc:  # noqa: BLE001 - last resort
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
