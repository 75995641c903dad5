import argparse
import logging
import sys
from typing import Optional

from pydantic import ValidationError

from s4lfsc import __version__
from s4lfsc.commands import add_global_flags, data, evaluation, experiment, training
from s4lfsc.config import parse_overrides, settings
from s4lfsc.exceptions import ConfigError, S4LFSCError
from s4lfsc.logging_config import configure_logging

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_INVALID = 2


def build_parser() -> argparse.ArgumentParser:
    """Top-level parser with one subcommand per pipeline step"""
    parser = argparse.ArgumentParser(
        prog="s4lfsc",
        allow_abbrev=False,
        description="Cross-domain few-shot hyperspectral image classification pipeline",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    add_global_flags(parser)
    subparsers = parser.add_subparsers(dest="command", required=True)
    for module in (data, training, evaluation, experiment):
        module.register(subparsers)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    """
    Parse arguments and dispatch a command

    Unrecognized `--key value` pairs are config overrides.

    Returns:
        0 on success, 2 for invalid input or configuration, 1 otherwise
    """
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    configure_logging(settings.log_level, settings.log_format, quiet=args.quiet)

    try:
        overrides = parse_overrides(extra)
        return args.handler(args, overrides)
    except ConfigError as e:
        key = f" [{e.key}]" if e.key else ""
        logger.error(f"Invalid configuration{key}: {str(e)}")
        return EXIT_INVALID
    except ValidationError as e:
        error = e.errors()[0]
        key = ".".join(str(part) for part in error["loc"])
        logger.error(f"Invalid value for '{key}': {error['msg']}")
        return EXIT_INVALID
    except S4LFSCError as e:
        logger.error(f"{type(e).__name__}: {str(e)}")
        return EXIT_INVALID
    except KeyboardInterrupt:
        logger.warning("Interrupted")
        return EXIT_FAILURE
    except Exception as e:
        logger.exception(f"Command '{args.command}' failed: {str(e)}")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
