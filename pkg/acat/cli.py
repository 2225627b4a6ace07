#!/usr/bin/env python3
"""
ACAT command line.

Global flags come before the subcommand:

    python cli.py [--config FILE] [--seed N] [--out DIR] [--threads N] [--log-level L] COMMAND
"""

import argparse
import logging
import sys
from typing import Callable, Dict, List, Optional

from acceptance import run_acceptance
from cli_docs import (
    ABLATE_HELP,
    ACCEPTANCE_HELP,
    CLI_DESCRIPTION,
    CLI_EPILOG,
    EVALUATE_HELP,
    GEN_COUNTERFACTUALS_HELP,
    GEN_DATA_HELP,
    GEN_SALIENCY_HELP,
    MAPS_HELP,
    METHOD_HELP,
    PIPELINE_HELP,
    SOURCE_HELP,
    TRAIN_ACAT_HELP,
    TRAIN_AE_HELP,
    TRAIN_BASELINE_HELP,
)
from config import DEFAULT_THREADS, LOG_LEVEL, setup_logging
from errors import RunConfigError
from models.config_models import SALIENCY_METHODS
from pipeline import AcatPipeline, load_run_config

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="acat",
        description=CLI_DESCRIPTION,
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=CLI_EPILOG,
    )
    parser.add_argument(
        '--config',
        default=None,
        help='JSON run config (default: built-in desk configuration)'
    )
    parser.add_argument(
        '--seed',
        type=int,
        default=None,
        help='Master seed; overrides the config and the dataset seed'
    )
    parser.add_argument(
        '--out',
        default=None,
        help='Output directory (default: config output_dir, then $ACAT_OUTPUT_DIR)'
    )
    parser.add_argument(
        '--threads',
        type=int,
        default=None,
        help=f'Worker threads for per-sample work (default: config threads, or {DEFAULT_THREADS})'
    )
    parser.add_argument(
        '--log-level',
        choices=['debug', 'info', 'warning', 'error'],
        default=LOG_LEVEL.lower(),
        help=f'Log level (default: {LOG_LEVEL.lower()})'
    )
    parser.add_argument(
        '--force',
        action='store_true',
        help='Re-execute stages even when their records are up to date'
    )

    commands = parser.add_subparsers(dest='command', required=True, metavar='COMMAND')
    commands.add_parser('gen-data', help=GEN_DATA_HELP)
    commands.add_parser('train-baseline', help=TRAIN_BASELINE_HELP)
    commands.add_parser('train-ae', help=TRAIN_AE_HELP)
    commands.add_parser('gen-counterfactuals', help=GEN_COUNTERFACTUALS_HELP)

    saliency = commands.add_parser('gen-saliency', help=GEN_SALIENCY_HELP)
    saliency.add_argument('--method', choices=SALIENCY_METHODS, required=True, help=METHOD_HELP)
    saliency.add_argument('--source', choices=['baseline', 'acat'], default='baseline', help=SOURCE_HELP)

    commands.add_parser('train-acat', help=TRAIN_ACAT_HELP)
    evaluate = commands.add_parser('evaluate', help=EVALUATE_HELP)
    evaluate.add_argument('--maps', default=None, help=MAPS_HELP)
    commands.add_parser('ablate', help=ABLATE_HELP)
    commands.add_parser('pipeline', help=PIPELINE_HELP)
    acceptance = commands.add_parser('acceptance', help=ACCEPTANCE_HELP)
    acceptance.add_argument('--samples', type=int, default=50, help='Lesion samples measured (default: 50)')
    return parser


def _per_run(pipeline: AcatPipeline, step: Callable[[int], object]):
    for run in range(pipeline.config.n_runs):
        step(run)


def _evaluate(pipeline: AcatPipeline, args: argparse.Namespace):
    if args.maps:
        pipeline.evaluate_maps(args.maps)
        return
    _per_run(pipeline, pipeline.evaluate_run)
    pipeline.aggregate()


COMMANDS: Dict[str, Callable[[AcatPipeline, argparse.Namespace], object]] = {
    'gen-data': lambda pipeline, args: pipeline.gen_data(),
    'train-baseline': lambda pipeline, args: _per_run(pipeline, pipeline.train_baseline),
    'train-ae': lambda pipeline, args: _per_run(pipeline, pipeline.train_autoencoder),
    'gen-counterfactuals': lambda pipeline, args: _per_run(
        pipeline, lambda run: pipeline.gen_saliency(run, 'counterfactual')),
    'gen-saliency': lambda pipeline, args: _per_run(
        pipeline, lambda run: pipeline.gen_saliency(run, args.method, args.source)),
    'train-acat': lambda pipeline, args: _per_run(pipeline, pipeline.train_acat),
    'evaluate': _evaluate,
    'ablate': lambda pipeline, args: pipeline.ablate(),
    'pipeline': lambda pipeline, args: pipeline.run_all(),
    'acceptance': lambda pipeline, args: run_acceptance(pipeline, max_samples=args.samples),
}


def main(argv: Optional[List[str]] = None) -> int:
    """Parse ``argv``, run the command and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit_:
        return EXIT_OK if exit_.code == 0 else EXIT_USAGE

    setup_logging(args.log_level)
    if args.threads is not None and args.threads < 1:
        logger.error("--threads must be at least 1")
        return EXIT_USAGE
    try:
        config = load_run_config(args.config, seed=args.seed, output_dir=args.out)
    except (RunConfigError, FileNotFoundError) as e:
        logger.error(f"❌ {e}")
        return EXIT_USAGE

    try:
        pipeline = AcatPipeline(config, threads=args.threads, force=args.force)
        logger.info(f"🔧 {args.command} in {pipeline.store.root} (seed {config.seed}, runs {config.n_runs})")
        COMMANDS[args.command](pipeline, args)
    except KeyboardInterrupt:
        logger.error("🛑 Interrupted")
        return EXIT_FAILURE
    except Exception as e:
        logger.error(f"❌ {args.command} failed: {e}")
        return EXIT_FAILURE
    logger.info(f"✅ {args.command} finished")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
