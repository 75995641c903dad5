"""CLI subcommands; each module registers its parsers on the shared subparsers"""

import argparse
import logging
from typing import Any

from s4lfsc.config import deep_merge, resolve_experiment_config, settings
from s4lfsc.schemas import ExperimentConfig

logger = logging.getLogger(__name__)


def add_global_flags(parser: argparse.ArgumentParser, suppress: bool = False) -> None:
    """--config/--seed/--out/--quiet, accepted before or after the subcommand"""
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="Experiment config JSON file")
    parser.add_argument("--seed", type=int, default=default, help="Base seed (base_seed)")
    parser.add_argument("--out", default=default, help="Output directory (output_dir)")
    parser.add_argument(
        "--quiet",
        action="store_true",
        default=argparse.SUPPRESS if suppress else False,
        help="Only log warnings and errors",
    )


def load_config(args: argparse.Namespace, overrides: dict[str, Any]) -> ExperimentConfig:
    """
    Resolve the experiment config for a command

    Precedence: global flags and `--key value` overrides > config file >
    per-dataset presets.
    """
    flags: dict[str, Any] = {}
    if args.seed is not None:
        flags["base_seed"] = args.seed
    if args.out is not None:
        flags["output_dir"] = args.out
    config = resolve_experiment_config(
        args.config, deep_merge(overrides, flags), data_root=settings.data_root
    )
    logger.debug(f"Resolved config: {config.model_dump_json()}")
    return config
