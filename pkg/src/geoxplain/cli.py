"""Command-line entry point.

Exit codes: 0 success, 1 config error, 2 missing artifacts, 3 backend fatal.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import yaml

from .config import load_config
from .errors import ConfigError, GeoxplainError

log = logging.getLogger("geoxplain")


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--seed", type=int, default=default, help="override run.seed")
    parser.add_argument("--workers", type=int, default=default, help="per-image worker threads")
    parser.add_argument("--limit", type=int, default=default, help="process only the first N eval images")
    parser.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geoxplain", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (
        ("extract", "attribution maps, segments and ranked crops for the eval split"),
        ("evaluate", "deletion/insertion tests against random crops"),
        ("train", "fit the desk-scale classifier"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True)
        _global_flags(p, suppress=True)
    p = sub.add_parser("report", help="plots and crop gallery from a run directory")
    p.add_argument("--run-dir", required=True)
    _global_flags(p, suppress=True)
    p = sub.add_parser("sweep", help="extract + evaluate over a parameter grid")
    p.add_argument("--config", required=True)
    p.add_argument("--grid", required=True)
    _global_flags(p, suppress=True)
    p = sub.add_parser("synth", help="write the planted-cue benchmark dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--train-per-class", type=int, default=200)
    p.add_argument("--eval-per-class", type=int, default=100)
    p.add_argument("--side", type=int, default=64)
    _global_flags(p, suppress=True)
    return parser


def _config(args) -> dict:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["run"]["seed"] = args.seed
    if args.limit is not None:
        cfg["run"]["limit"] = args.limit
    return cfg


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    from . import pipeline, report

    try:
        if args.command == "extract":
            out = pipeline.cmd_extract(_config(args), args.workers)
            out = {"run_dir": out["run_dir"], "counts": out["stages"]["extract"]["counts"]}
        elif args.command == "evaluate":
            out = pipeline.cmd_evaluate(_config(args), args.workers)
        elif args.command == "train":
            out = pipeline.cmd_train(_config(args))
        elif args.command == "report":
            out = report.cmd_report(args.run_dir)
        elif args.command == "sweep":
            try:
                with open(args.grid) as fh:
                    grid = yaml.safe_load(fh)
            except (OSError, yaml.YAMLError) as exc:
                raise ConfigError(f"cannot read grid file: {exc}") from exc
            out = pipeline.cmd_sweep(_config(args), grid, args.workers)
        else:
            from .synthetic import make_planted_cue_dataset

            path = make_planted_cue_dataset(
                args.out, args.train_per_class, args.eval_per_class, args.side, args.seed or 0
            )
            out = {"manifest": str(path)}
    except GeoxplainError as exc:
        code = getattr(exc, "exit_code", 1)
        print(f"error: {exc}", file=sys.stderr)
        return code
    print(json.dumps(out, indent=2, default=str))
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
