"""The `deepid` command line.

Usage:

    Generate a synthetic dataset:

        $ deepid generate --config configs/desk.toml --out data/synthetic

    Run the experiment named in a config file:

        $ deepid sweep --config configs/lambda_sweep.toml --out runs/lambda --workers 4

    Train, evaluate and analyze a single network:

        $ deepid train --config configs/desk.toml --out runs/net
        $ deepid evaluate runs/net/network.bin --config configs/desk.toml --out runs/eval
        $ deepid analyze runs/net/network.bin --config configs/desk.toml --out runs/analysis
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
from collections.abc import Sequence
from pathlib import Path

from deepid import __version__
from deepid.config import ExperimentConfig, ExperimentKind, load_config
from deepid.dataset import generate_dataset, ingest_dataset, write_dataset
from deepid.errors import DeepIdError
from deepid.experiments import (
    analyze_network,
    evaluate_network,
    run_experiment,
    run_selection,
    train_network,
)

logger = logging.getLogger("deepid")


def _common_arguments() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(add_help=False)
    parser.add_argument("--config", type=Path, help="Experiment configuration file (TOML).")
    parser.add_argument("--seed", type=int, help="Override the configured seed.")
    parser.add_argument("--out", type=Path, help="Output directory.")
    parser.add_argument("--workers", type=int, help="Parallel training jobs.")
    parser.add_argument(
        "--force", action="store_true", help="Overwrite existing outputs."
    )
    parser.add_argument(
        "-v", "--verbose", action="store_true", help="Enable debug logging."
    )
    parser.add_argument("-q", "--quiet", action="store_true", help="Disable logging.")
    return parser


def build_parser() -> argparse.ArgumentParser:
    common = _common_arguments()
    parser = argparse.ArgumentParser(
        prog="deepid",
        description=(
            "Face verification embeddings under joint identification-verification supervision."
        ),
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    commands.add_parser(
        "generate", parents=[common], help="Write a synthetic dataset with its manifest."
    )

    ingest = commands.add_parser(
        "ingest", parents=[common], help="Validate a dataset directory and its manifest."
    )
    ingest.add_argument("dataset", type=Path, help="Dataset root directory.")
    ingest.add_argument("--manifest", type=Path, help="Manifest file, if not in the root.")

    commands.add_parser(
        "train", parents=[common], help="Train one network on whole images."
    )

    evaluate = commands.add_parser(
        "evaluate", parents=[common], help="Measure verification accuracy of a network."
    )
    evaluate.add_argument("network", type=Path, help="Trained network file.")
    evaluate.add_argument("--pairs", type=Path, help="Pairs file over the test identities.")

    sweep = commands.add_parser(
        "sweep", parents=[common], help="Run the configured experiment."
    )
    sweep.add_argument(
        "--kind",
        choices=[kind.value for kind in ExperimentKind],
        help="Override the configured experiment kind.",
    )

    commands.add_parser(
        "select", parents=[common], help="Train patch networks and select patch groups."
    )

    analyze = commands.add_parser(
        "analyze", parents=[common], help="Export scatter spectra and a 2-D PCA view."
    )
    analyze.add_argument("network", type=Path, help="Trained network file.")
    return parser


def _configure_logging(args: argparse.Namespace) -> None:
    if args.quiet:
        log_level = logging.CRITICAL
    elif args.verbose:
        log_level = logging.DEBUG
    else:
        log_level = logging.INFO
    logging.basicConfig(
        level=log_level,
        format="%(asctime)s %(levelname)s %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )


def _load(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config is not None else ExperimentConfig()
    if getattr(args, "kind", None) is not None:
        cfg = dataclasses.replace(cfg, kind=ExperimentKind(args.kind))
    return cfg.with_overrides(
        seed=args.seed, output=args.out, workers=args.workers, force=args.force
    )


def run(args: argparse.Namespace) -> None:
    cfg = _load(args)
    match args.command:
        case "generate":
            ds = generate_dataset(cfg.synthetic)
            manifest = write_dataset(ds, cfg.output, force=cfg.force)
            logger.info(
                "Wrote %d images of %d identities to %s", len(ds), ds.n_identities, manifest
            )
        case "ingest":
            ds = ingest_dataset(args.dataset, args.manifest)
            logger.info(
                "%d images of %d identities, shape %s, %s",
                len(ds),
                ds.n_identities,
                ds.image_shape,
                "with landmarks" if ds.landmarks is not None else "without landmarks",
            )
            if args.out is not None:
                manifest = write_dataset(ds, args.out, force=cfg.force)
                logger.info("Wrote a normalized copy to %s", manifest)
        case "train":
            _, path = train_network(cfg)
            logger.info("Saved network to %s", path)
        case "evaluate":
            evaluate_network(cfg, args.network, args.pairs)
        case "sweep":
            summary = run_experiment(cfg)
            logger.info("Summary:\n%s", summary.to_string(index=False))
        case "select":
            run_selection(cfg)
        case "analyze":
            analyze_network(cfg, args.network)
        case _:
            raise ValueError(f"Invalid command: {args.command}")


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logging(args)
    try:
        run(args)
    except DeepIdError as err:
        logger.error("%s", err)
        logger.debug("Traceback", exc_info=True)
        return 1
    return 0
