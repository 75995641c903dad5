import argparse
import logging
from typing import Any

from s4lfsc.commands import add_global_flags, load_config
from s4lfsc.config import require_paths
from s4lfsc.dependencies import get_experiment_service

logger = logging.getLogger(__name__)


def evaluate_command(args: argparse.Namespace, overrides: dict[str, Any]) -> int:
    """Score a fine-tuned model on its test split and draw the map"""
    config = load_config(args, overrides)
    require_paths(config, ["target_cube", "target_gt"])
    service = get_experiment_service(config)
    service.snapshot_config()
    service.evaluate_run(args.run, split_path=args.split, checkpoint_path=args.checkpoint)
    return 0


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser(
        "evaluate", help="Evaluate a fine-tuned model", allow_abbrev=False
    )
    add_global_flags(parser, suppress=True)
    parser.add_argument("--run", type=int, default=0, help="Run index under <out>/runs")
    parser.add_argument("--split", default=None, help="Split JSON (default: the run's split)")
    parser.add_argument("--checkpoint", default=None, help="Fused-model archive")
    parser.set_defaults(handler=evaluate_command)
