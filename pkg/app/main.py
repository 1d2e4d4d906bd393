"""
Command-line entry point.

    python -m app.main --config problem.txt [--out DIR] [--seed N] [--tol X] [--threads N]

Flags override BALANCED_LAB_* environment variables, which override the
problem file.
"""
from pathlib import Path
from typing import List, Optional
import argparse
import logging
import sys

from app.core.config import settings
from app.core.exceptions import ConfigError
from app.services.config_service import apply_overrides, load_config
from app.services.run_service import EXIT_CONFIG, run

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="balanced-lab", description=settings.APP_NAME)
    parser.add_argument("--config", type=Path, required=True, help="Problem file (key = value)")
    parser.add_argument("--out", dest="out_dir", type=str, default=None, help="Output directory")
    parser.add_argument("--seed", type=int, default=None, help="Seed for every sampled check")
    parser.add_argument("--tol", type=float, default=None, help="Residual tolerance")
    parser.add_argument("--threads", type=int, default=None, help="Workers for sweep commands")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, settings.LOG_LEVEL.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        config = load_config(args.config)
        config = apply_overrides(
            config,
            {"out_dir": args.out_dir, "seed": args.seed, "tol": args.tol, "threads": args.threads},
        )
    except ConfigError as e:
        logger.error(f"{type(e).__name__}: {e.message}")
        return EXIT_CONFIG
    return run(config)


if __name__ == "__main__":
    sys.exit(main())
