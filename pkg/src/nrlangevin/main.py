"""Command-line entry point: ``nrl <command> --config FILE``."""

import argparse
import dataclasses
import logging
import sys

from .config import COMMANDS, load_config
from .constants import EXIT_ALL_BLOWUP, EXIT_CONFIG_ERROR, EXIT_OK
from .errors import ConfigError
from .experiments import COMMAND_RUNNERS, write_csv
from .logging_config import setup_logging

logger = logging.getLogger(__name__)


def _parse_args(argv: list[str] | None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        prog="nrl",
        description="Nonreversible Langevin sampling experiments.",
    )
    parser.add_argument("command", choices=COMMANDS, help="experiment to run")
    parser.add_argument("--config", required=True, help="YAML or JSON experiment file")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", help="CSV output path (default: config 'output' or stdout)")
    parser.add_argument("--threads", type=int, help="override worker thread count")
    parser.add_argument("--log-dir", help="also write a timestamped log file here")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    return parser.parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    """Top-level orchestration function; returns the process exit code."""
    args = _parse_args(argv)
    setup_logging(
        log_dir=args.log_dir,
        level=logging.DEBUG if args.verbose else logging.INFO,
    )

    try:
        config = load_config(args.config)
        overrides = {}
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError([("--seed", "must be >= 0")])
            overrides["seed"] = args.seed
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError([("--threads", "must be >= 1")])
            overrides["threads"] = args.threads
        if args.out is not None:
            overrides["output"] = args.out
        config = dataclasses.replace(config, **overrides)
        outcome = COMMAND_RUNNERS[args.command](config)
    except ConfigError as exc:
        for field, message in exc.problems:
            print(f"config error: {field}: {message}", file=sys.stderr)
        return EXIT_CONFIG_ERROR

    write_csv(outcome, config.output)
    if outcome.all_blown_up:
        logger.error("Every cell blew up")
        return EXIT_ALL_BLOWUP
    return EXIT_OK
