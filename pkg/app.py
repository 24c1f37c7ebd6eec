import argparse
import sys
from pathlib import Path
from typing import List, Optional

from loguru import logger
from config.settings import settings
from workers.experiment_worker import COMMANDS, EXIT_CONFIG_ERROR, execute


def _seed(value: str) -> int:
    seed = int(value)
    if not 0 <= seed < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed must be a 64-bit unsigned integer, got {value}")
    return seed


def _positive(value: str) -> int:
    number = int(value)
    if number < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return number


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedgain",
        description="Gain-triggered gradient transmission for distributed linear regression",
    )
    parser.add_argument("command", choices=sorted(COMMANDS), help="experiment to run")
    parser.add_argument("--config", required=True, type=Path, help="experiment file")
    parser.add_argument("--out", default=None, help="output directory (overrides output_dir)")
    parser.add_argument("--seed", type=_seed, default=None, help="base seed (overrides stream.seed)")
    parser.add_argument("--replications", type=_positive, default=None, help="replications per grid point")
    parser.add_argument("--no-plots", action="store_true", help="skip SVG output")
    return parser


def configure_logging():
    logger.remove()
    logger.add(sys.stderr, level=settings.LOG_LEVEL)


def main(argv: Optional[List[str]] = None) -> int:
    configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on usage errors; --help exits 0
        return int(e.code or 0)

    logger.info(f"🚀 fedgain {args.command} --config {args.config}")
    if not args.config.is_file():
        logger.error(f"❌ Config file not found: {args.config}")
        return EXIT_CONFIG_ERROR

    return execute(
        args.command,
        args.config,
        out=args.out,
        seed=args.seed,
        replications=args.replications,
        no_plots=args.no_plots,
    )


if __name__ == "__main__":
    sys.exit(main())
