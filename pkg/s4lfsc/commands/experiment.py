import argparse
import logging
from typing import Any

from s4lfsc.commands import add_global_flags, load_config
from s4lfsc.config import require_paths
from s4lfsc.dependencies import get_experiment_service

logger = logging.getLogger(__name__)


def run_command(args: argparse.Namespace, overrides: dict[str, Any]) -> int:
    """Stages 1 -> 2 -> 3 for every run, then aggregate"""
    config = load_config(args, overrides)
    required = ["target_cube", "target_gt", "hetero_pool"]
    if config.ablation.hom_fsl or config.ablation.mr_ssl:
        required += ["homo_cube", "homo_gt"]
    require_paths(config, required)

    result = get_experiment_service(config).run()
    print((result.output_dir / "report.txt").read_text(encoding="utf-8"), end="")
    return 0


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser(
        "run", help="Full experiment with aggregation", allow_abbrev=False
    )
    add_global_flags(parser, suppress=True)
    parser.set_defaults(handler=run_command)
