"""Command line: run, sweep and validate experiment configs."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import MODES, load_config, parse_grid
from .errors import ValidationError
from .runner import emit_report, emit_sweep, format_summary, run_experiment, run_sweep


def _seed_list(text: str) -> list:
    try:
        return [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers: {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtdistill", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment over all configured seeds")
    run.add_argument("--config", required=True)
    run.add_argument("--mode", choices=MODES)
    run.add_argument("--seeds", type=_seed_list)
    run.add_argument("--out", default="results")
    run.add_argument("--jobs", type=int, default=1)

    sweep = sub.add_parser("sweep", help="one experiment per value of a hyperparameter")
    sweep.add_argument("--config", required=True)
    sweep.add_argument("--param", required=True)
    sweep.add_argument("--grid", required=True, help="comma-separated values")
    sweep.add_argument("--mode", choices=MODES)
    sweep.add_argument("--seeds", type=_seed_list)
    sweep.add_argument("--out", default="sweep")
    sweep.add_argument("--jobs", type=int, default=1)

    val = sub.add_parser("validate", help="check a config file and print the resolved values")
    val.add_argument("--config", required=True)
    return parser


def _load(args):
    config = load_config(args.config)
    if getattr(args, "mode", None):
        config.mode = args.mode
    if getattr(args, "seeds", None):
        config.seeds = args.seeds
    return config.validate()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = _load(args)
        if args.command == "validate":
            print(json.dumps(config.to_dict(), indent=2, sort_keys=True))
            return 0
        if args.command == "run":
            report = run_experiment(config, args.jobs)
            emit_report(report, args.out)
            print(format_summary(report), end="")
            return 1 if report.failed else 0
        grid = parse_grid(config, args.param, args.grid)
        if not grid:
            raise ValidationError("empty grid")
        table = run_sweep(config, args.param, grid, args.jobs)
        path = emit_sweep(args.param, table, args.out)
        for value, rep in table:
            print(f"{args.param}={value}: mean {rep.mean:.4f} std {rep.std:.4f}")
        print(f"wrote {path}")
        return 1 if any(rep.failed for _, rep in table) else 0
    except (ValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
