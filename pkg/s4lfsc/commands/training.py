import argparse
import logging
from typing import Any, Optional

from s4lfsc.commands import add_global_flags, load_config
from s4lfsc.config import DATASET_CLASSES, require_paths
from s4lfsc.dependencies import get_experiment_service
from s4lfsc.exceptions import ConfigError
from s4lfsc.repositories import CheckpointRepository, CubeRepository, GroundTruthRepository
from s4lfsc.schemas import ExperimentConfig

logger = logging.getLogger(__name__)


def target_classes(config: ExperimentConfig) -> int:
    """Class count of the target, from its ground truth or the dataset preset"""
    if config.paths.target_gt is not None:
        return GroundTruthRepository.load(config.paths.target_gt).n_classes
    if config.target.value in DATASET_CLASSES:
        return DATASET_CLASSES[config.target.value]
    raise ConfigError("Cannot infer the number of classes", key="paths.target_gt")


def pretrain_spatial_command(args: argparse.Namespace, overrides: dict[str, Any]) -> int:
    config = load_config(args, overrides)
    require_paths(config, ["hetero_pool"])
    service = get_experiment_service(config)
    service.snapshot_config()
    log = service.pretrain_spatial(target_classes(config), service.checkpoint_dir, config.base_seed)
    logger.info(f"Spatial pretraining done in {log.training_s:.1f}s: {log.checkpoints[-1]}")
    return 0


def pretrain_spectral_command(args: argparse.Namespace, overrides: dict[str, Any]) -> int:
    config = load_config(args, overrides)
    require_paths(config, ["target_cube"])
    if config.ablation.hom_fsl or config.ablation.mr_ssl:
        require_paths(config, ["homo_cube", "homo_gt"])
    service = get_experiment_service(config)
    service.snapshot_config()
    bands = CubeRepository.describe(config.paths.target_cube).bands
    log = service.pretrain_spectral(
        target_classes(config), bands, service.checkpoint_dir, config.base_seed
    )
    if log.skipped:
        logger.info("Spectral pretraining skipped by the ablation flags")
    else:
        logger.info(f"Spectral pretraining done in {log.training_s:.1f}s: {log.checkpoints[-1]}")
    return 0


def _existing_checkpoint(checkpoints: CheckpointRepository, stage: str) -> Optional[str]:
    return str(checkpoints.path_for(stage)) if checkpoints.exists(stage) else None


def finetune_command(args: argparse.Namespace, overrides: dict[str, Any]) -> int:
    config = load_config(args, overrides)
    require_paths(config, ["target_cube", "target_gt"])
    if args.run >= config.n_runs:
        raise ConfigError(f"--run {args.run} is outside n_runs={config.n_runs}", key="run")
    service = get_experiment_service(config)
    service.snapshot_config()
    checkpoints = CheckpointRepository(service.checkpoint_dir)
    result = service.finetune(
        service.load_target(),
        args.run,
        _existing_checkpoint(checkpoints, "spatial"),
        _existing_checkpoint(checkpoints, "spectral"),
    )
    if result.report is not None:
        logger.info(
            f"Run {args.run}: best OA={result.report.oa:.4f} AA={result.report.aa:.4f} "
            f"Kappa={result.report.kappa:.4f}"
        )
    return 0


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser(
        "pretrain-spatial", help="Stage 1 on the heterogeneous pool", allow_abbrev=False
    )
    add_global_flags(parser, suppress=True)
    parser.set_defaults(handler=pretrain_spatial_command)

    parser = subparsers.add_parser(
        "pretrain-spectral", help="Stage 2 on the homogeneous cube", allow_abbrev=False
    )
    add_global_flags(parser, suppress=True)
    parser.set_defaults(handler=pretrain_spectral_command)

    parser = subparsers.add_parser(
        "finetune", help="Stage 3 on the target for one run", allow_abbrev=False
    )
    add_global_flags(parser, suppress=True)
    parser.add_argument("--run", type=int, default=0, help="Run index (seed = base_seed + run)")
    parser.set_defaults(handler=finetune_command)
