"""Command line: ``sgdlab run|validate|catalog``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from ..dynamics import SCHEDULE_KINDS
from ..objectives import CATALOG as OBJECTIVES
from ..oracle import CATALOG as NOISES
from .config import KINDS, ConfigError, load_config, validate
from .report import FORMATS, ReportError, emit_report, human_table
from .runner import ExperimentError, run_experiment


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sgdlab", description="Stochastic-approximation experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment config")
    run.add_argument("config")
    run.add_argument("--out", help="output directory (overrides output.dir)")
    run.add_argument("--threads", type=int, default=1, help="concurrent run batches")
    run.add_argument("--format", action="append", choices=FORMATS, help="report formats (default: all)")

    val = sub.add_parser("validate", help="check a config without running it")
    val.add_argument("config")

    sub.add_parser("catalog", help="list objectives, noise models, schedules and experiment kinds")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    if args.command == "catalog":
        print("objectives:  " + ", ".join(sorted(OBJECTIVES)))
        print("noise:       " + ", ".join(sorted(NOISES)))
        print("schedules:   " + ", ".join(SCHEDULE_KINDS))
        print("experiments: " + ", ".join(KINDS))
        return 0
    try:
        cfg = load_config(args.config)
        if args.command == "validate":
            for w in validate(cfg):
                print(f"warning: {w}")
            print("ok")
            return 0
        out = args.out or cfg.output_dir
        report = run_experiment(replace(cfg, output_dir=""), threads=args.threads)
        if out:
            emit_report(report, out, args.format or FORMATS)
        sys.stdout.write(human_table(report))
    except (OSError, ConfigError, ExperimentError, ReportError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
