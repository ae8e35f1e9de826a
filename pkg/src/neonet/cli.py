"""CLI entry point for neonet."""

from __future__ import annotations

import argparse
from pathlib import Path

from .errors import (
    ChecksumError,
    ConfigError,
    MissingStageError,
    NeonetError,
    NiftiFormatError,
)

EVALUATIONS = ("recon", "fid", "classification", "ablation")


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--config",
        type=Path,
        default=None,
        help="Path to YAML config file (overrides preset values where specified)",
    )
    parser.add_argument(
        "--preset",
        choices=["full", "desk"],
        default="full",
        help="Parameter preset; 'desk' runs a small cohort on one CPU (default: full)",
    )
    parser.add_argument(
        "--output-dir",
        type=Path,
        default=None,
        help="Output root (default: $NEONET_OUTPUT or ./neonet-out)",
    )
    parser.add_argument("--seed", type=int, default=None, help="Base random seed")
    parser.add_argument(
        "--force",
        action="store_true",
        default=False,
        help="Rerun stages even when the run manifest says they are up to date",
    )
    parser.add_argument(
        "--verbose",
        action="store_true",
        default=False,
        help="Show training progress",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="neonet",
        description="Phantom-cohort PNI pipeline: TLCR crops, latent diffusion, ControlNet, PattenNet",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    _add_common(sub.add_parser("phantom", help="Generate the phantom cohort and its folds"))
    _add_common(sub.add_parser("tlcr", help="Crop tumor-centred dual-channel patches"))

    train = sub.add_parser("train", help="Train one stage for one fold")
    _add_common(train)
    train.add_argument("--stage", choices=["vae", "ldm", "controlnet", "classifier"], required=True)
    train.add_argument("--fold", type=int, required=True, help="Fold index (1-based)")

    generate = sub.add_parser("generate", help="Generate synthetic PNI+ patches for one fold")
    _add_common(generate)
    generate.add_argument("--fold", type=int, required=True, help="Fold index (1-based)")
    generate.add_argument("--ratio", type=float, required=True, help="Fraction of the class deficit to fill")

    evaluate = sub.add_parser("evaluate", help="Write an evaluation report")
    _add_common(evaluate)
    evaluate.add_argument("--what", choices=EVALUATIONS, required=True)

    _add_common(sub.add_parser("crossval", help="Run every stage for every fold and ratio"))
    return parser


def exit_code(error: NeonetError) -> int:
    if isinstance(error, ConfigError):
        return 2
    if isinstance(error, MissingStageError):
        return 3
    if isinstance(error, (ChecksumError, NiftiFormatError)):
        return 4
    return 1


def run(args: argparse.Namespace) -> None:
    from .config import RunConfig
    from .orchestrator import Pipeline

    config = RunConfig.from_args(args)
    pipeline = Pipeline(config, force=args.force)

    if args.command == "phantom":
        pipeline.phantom()
    elif args.command == "tlcr":
        pipeline.tlcr()
    elif args.command == "train":
        pipeline.train(args.stage, args.fold)
    elif args.command == "generate":
        pipeline.generate(args.fold, args.ratio)
    elif args.command == "evaluate":
        print(f"Report: {pipeline.evaluate(args.what)}")
    elif args.command == "crossval":
        print(f"Cross-validation grid: {pipeline.crossval()}")
    print(f"Output root: {config.output_root}")


def main(argv: list[str] | None = None) -> None:
    parser = build_parser()
    args = parser.parse_args(argv)

    from .output import print_error

    try:
        run(args)
    except NeonetError as e:
        print_error(str(e))
        raise SystemExit(exit_code(e))
