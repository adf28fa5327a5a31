#!/usr/bin/env python3

import argparse
import logging
import os
import sys

LOG_LEVEL_ENV = "IRGNM_LOG_LEVEL"


def setup_logging(verbose: bool = False):
    if verbose:
        level = logging.DEBUG
    else:
        # Only show warnings and errors unless the environment asks for more
        name = os.environ.get(LOG_LEVEL_ENV, "WARNING").upper()
        level = getattr(logging, name, None)
        if not isinstance(level, int):
            level = logging.WARNING
    logging.basicConfig(format="%(asctime)s - %(levelname)s - %(message)s", level=level)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="irgnm",
        description="Adaptive iteratively regularized Gauss-Newton experiments",
    )
    parser.add_argument("--verbose", "-v", action="store_true", help="Enable verbose logging")

    subparsers = parser.add_subparsers(dest="command", required=True, help="Commands")

    # Options shared by every subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", help="Config file path (default: built-in defaults)")
    common.add_argument("--out", "-o", help="Output directory (overrides [study] output_dir)")
    common.add_argument("--seed", type=int, help="Noise seed (overrides [run] seed)")
    common.add_argument(
        "--fine-factor", type=int, help="Reference mesh factor (overrides [study] fine_factor)"
    )

    subparsers.add_parser(
        "validate", parents=[common], help="Check the run constants and print derived constants"
    )

    run_parser = subparsers.add_parser("run", parents=[common], help="Run the adaptive IRGNM once")
    run_parser.add_argument(
        "--dump-functions",
        action="store_true",
        help="Also write the final coefficient and state as (vertex, value) CSV",
    )

    subparsers.add_parser(
        "rate-study", parents=[common], help="Error against noise level on a dense benchmark"
    )
    subparsers.add_parser(
        "estimator-study", parents=[common], help="Estimator effectivity under uniform refinement"
    )
    return parser


def main(argv: list[str] | None = None):
    """Main CLI entry point with subcommand routing"""
    parser = build_parser()
    args = parser.parse_args(argv)

    setup_logging(args.verbose)

    from .run import cmd_run, cmd_validate
    from .study import cmd_estimator_study, cmd_rate_study

    handlers = {
        "validate": cmd_validate,
        "run": cmd_run,
        "rate-study": cmd_rate_study,
        "estimator-study": cmd_estimator_study,
    }
    sys.exit(handlers[args.command](args))


if __name__ == "__main__":
    main()
