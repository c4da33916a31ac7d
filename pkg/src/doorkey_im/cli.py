"""Command-line entry point: ``doorkey-im {run,aggregate,plot,solve}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import runner
from .gridworld import ConfigurationError, new_doorkey, render, shortest_plan
from .llm_reward import RewardAcquisitionError
from .nn import TrainingError

PROG = "doorkey-im"


def _cmd_run(args) -> int:
    cfg = runner.load_run_config(args.config)
    if args.workers is not None:
        cfg.workers = args.workers
    for path in runner.run(cfg):
        print(path)
    return 0


def _cmd_aggregate(args) -> int:
    curve = runner.aggregate(args.inputs, args.window)
    print(runner.write_aggregate(curve, args.out))
    return 0


def _cmd_plot(args) -> int:
    labels = args.labels or [Path(p).stem for p in args.inputs]
    if len(labels) != len(args.inputs):
        raise runner.UsageError(f"{len(labels)} labels for {len(args.inputs)} inputs")
    curves = {label: runner.read_aggregate(p) for label, p in zip(labels, args.inputs)}
    print(runner.plot(curves, args.out))
    return 0


def _cmd_solve(args) -> int:
    world = new_doorkey(args.size, args.seed)
    print(render(world), end="")
    plan = shortest_plan(world)
    if plan is None:
        print("unsolvable")
        return 1
    print(f"shortest plan: {len(plan)} steps")
    print(" ".join(a.name.lower() for a in plan))
    return 0


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=PROG, description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train every seed of a run config, one CSV per seed")
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--workers", type=_positive_int, help="override the config's worker count")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("aggregate", help="smooth per-seed CSVs and write episode,mean,std")
    p.add_argument("--inputs", nargs="+", required=True, help="per-seed CSV files")
    p.add_argument("--window", type=_positive_int, default=100, help="trailing moving-average window")
    p.add_argument("--out", required=True, help="output aggregate CSV")
    p.set_defaults(func=_cmd_aggregate)

    p = sub.add_parser("plot", help="draw aggregate CSVs as an SVG line chart")
    p.add_argument("--inputs", nargs="+", required=True, help="aggregate CSV files")
    p.add_argument("--labels", nargs="+", help="legend names (default: file stems)")
    p.add_argument("--out", required=True, help="output SVG")
    p.set_defaults(func=_cmd_plot)

    p = sub.add_parser("solve", help="print a layout and its BFS shortest plan")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--size", type=int, default=8)
    p.set_defaults(func=_cmd_solve)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (runner.UsageError, ConfigurationError) as exc:
        print(f"{PROG} {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (RewardAcquisitionError, TrainingError, OSError) as exc:
        print(f"{PROG} {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
