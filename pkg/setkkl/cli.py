"""Command-line front end: setkkl {transform-build,observe,diagnose} --config FILE."""
import argparse
import logging
import sys
from typing import Optional, Sequence

from .config import DEFAULT_LOG_LEVEL, get_env_var, load_config, load_experiment
from .exceptions import ConfigError, SetKKLError
from .harness import COMMANDS, apply_overrides, run_command

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

QUADRATURE_NOTE = (
    "The transform integral defaults to RK4 quadrature; set transform.quadrature to "
    "\"trapezoid\" in the config for the second-order endpoint rule."
)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="Experiment JSON document")
    common.add_argument("--out", help="Output directory (overrides the config and SETKKL_OUT_DIR)")
    common.add_argument("--seed", type=int, help="Experiment seed override")
    common.add_argument("--workers", type=int, help="Worker threads for atlas tabulation and noise sweeps")
    common.add_argument("--env-file", help="Optional .env file to load")
    common.add_argument("--quiet", action="store_true", help="Only log warnings and errors")

    parser = argparse.ArgumentParser(
        prog="setkkl",
        description="Set-valued KKL observers: transform tabulation, observer runs and diagnostics",
        epilog=QUADRATURE_NOTE,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("transform-build", parents=[common], help="Tabulate T and map its conditioning",
                   epilog=QUADRATURE_NOTE)
    sub.add_parser("observe", parents=[common], help="Run the set-valued observer", epilog=QUADRATURE_NOTE)
    sub.add_parser("diagnose", parents=[common], help="Cardinality, characterization and rank diagnostics")
    assert set(sub.choices) == set(COMMANDS)
    return parser


def configure_logging(quiet: bool) -> None:
    level = "WARNING" if quiet else get_env_var("SETKKL_LOG_LEVEL", DEFAULT_LOG_LEVEL).upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.env_file:
        load_config(args.env_file)
    configure_logging(args.quiet)

    try:
        config = apply_overrides(load_experiment(args.config), out=args.out,
                                 seed=args.seed, workers=args.workers)
        run_command(args.command, config)
    except ConfigError as e:
        where = f" (field {e.field})" if e.field else f" (line {e.line})" if e.line else ""
        logger.error("Configuration error%s: %s", where, e)
        return EXIT_CONFIG
    except SetKKLError as e:
        logger.error("Numerical failure in %s: %s", type(e).__name__, e)
        return EXIT_NUMERICAL
    except (ValueError, ArithmeticError) as e:
        logger.error("Numerical failure in %s: %s", type(e).__name__, e)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
