"""Command-line entry point.

Subcommands mirror the pipeline stages: gen-data, train-source,
pseudo-iter, adapt, eval, report, and run (everything end to end).
Exit codes: 0 success, 2 config error, 3 stage error, 4 artifact
mismatch.
"""

from __future__ import annotations

import argparse
import json
import sys

from .config import ConfigError, apply_overrides, load_config, resolve_config
from .detector import TrainingStepError
from .adapt import StageError
from . import pipeline
from .pipeline import ArtifactMismatch

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3
EXIT_MISMATCH = 4


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON config file (defaults used if omitted)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   dest="overrides", help="override a config key (dotted path)")
    p.add_argument("--out", help="run directory (default: io.out_dir from config)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uamt",
        description="Source-free domain adaptation pipeline on synthetic BEV scenes",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate dataset splits")
    _add_common(p)

    p = sub.add_parser("train-source", help="train the source model")
    _add_common(p)
    p.add_argument("--oracle", action="store_true",
                   help="analysis mode: train on labeled target data (ceiling)")

    p = sub.add_parser("pseudo-iter", help="iterative pseudo-label generation")
    _add_common(p)
    p.add_argument("--iterations", type=int, help="number of refinement rounds J")
    p.add_argument("--delta", help="comma-separated confidence thresholds")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("adapt", help="uncertainty-aware mean-teacher training")
    _add_common(p)
    p.add_argument("--no-uncertainty", action="store_true",
                   help="plain mean teacher: force all loss weights C to 1")
    p.add_argument("--mc-passes", type=int, help="teacher dropout passes T")
    p.add_argument("--alpha", type=float, help="EMA keep ratio")
    p.add_argument("--per-epoch-ema", action="store_true")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    _add_common(p)
    p.add_argument("--checkpoint", default="student",
                   help="checkpoint name (source, pseudo_iterJ, student, teacher, oracle)")
    p.add_argument("--split", default="target_eval",
                   choices=["source_train", "source_eval", "target_train", "target_eval"])
    p.add_argument("--force", action="store_true",
                   help="accept artifacts with mismatching config hash")

    p = sub.add_parser("report", help="emit diagnostic CSVs and summary")
    _add_common(p)
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("run", help="full pipeline end to end")
    _add_common(p)

    return parser


def _resolve(args) -> tuple[dict, str]:
    config = load_config(args.config) if args.config else resolve_config()
    cli_sets = list(args.overrides)
    if getattr(args, "iterations", None) is not None:
        cli_sets.append(f"adapt.iterations={args.iterations}")
    if getattr(args, "delta", None):
        values = [float(x) for x in args.delta.split(",")]
        cli_sets.append(f"adapt.delta_schedule={json.dumps(values)}")
    if getattr(args, "no_uncertainty", False):
        cli_sets.append("adapt.use_uncertainty=false")
    if getattr(args, "mc_passes", None) is not None:
        cli_sets.append(f"adapt.mc_passes={args.mc_passes}")
    if getattr(args, "alpha", None) is not None:
        cli_sets.append(f"adapt.alpha={args.alpha}")
    if getattr(args, "per_epoch_ema", False):
        cli_sets.append("adapt.per_epoch_ema=true")
    config = apply_overrides(config, cli_sets)
    out_dir = args.out or config["io"]["out_dir"]
    return config, out_dir


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config, out = _resolve(args)
    except (ConfigError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "gen-data":
            manifest = pipeline.stage_gen_data(config, out)
            print(json.dumps(manifest, indent=2))
        elif args.command == "train-source":
            name = pipeline.stage_train_source(config, out, oracle=args.oracle)
            print(f"trained checkpoint: {name}")
        elif args.command == "pseudo-iter":
            written = pipeline.stage_pseudo_iter(config, out, force=args.force)
            print(f"pseudo-label rounds: {written}")
        elif args.command == "adapt":
            info = pipeline.stage_adapt(config, out, force=args.force)
            print(json.dumps(info))
        elif args.command == "eval":
            report = pipeline.stage_eval(
                config, out, args.checkpoint, args.split, force=args.force
            )
            print(json.dumps({
                t: (r.ap if r.ap is not None else "absent")
                for t, r in report.tiers.items()
            }, indent=2))
        elif args.command == "report":
            summary = pipeline.stage_report(config, out, force=args.force)
            print(json.dumps(summary, indent=2, default=str))
        elif args.command == "run":
            headline = pipeline.run_pipeline(config, out)
            print(json.dumps(headline, indent=2, default=str))
    except ArtifactMismatch as exc:
        print(f"artifact mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (StageError, TrainingStepError, OSError, ValueError) as exc:
        print(f"stage error ({args.command}): {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
