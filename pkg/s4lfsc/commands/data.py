import argparse
import logging
from pathlib import Path
from typing import Any

from s4lfsc.commands import add_global_flags, load_config
from s4lfsc.config import require_paths, settings
from s4lfsc.data import (
    augment_labeled_set,
    import_cube,
    import_ground_truth,
    normalize_cube,
    subsample_classes,
)
from s4lfsc.dependencies import get_experiment_service
from s4lfsc.exceptions import ConfigError
from s4lfsc.repositories import (
    SplitRepository,
    export_cube,
    export_ground_truth,
    read_json,
    write_json,
)
from s4lfsc.schemas import CubeDescriptor, GroundTruthDescriptor
from s4lfsc.seeding import derive_rng

logger = logging.getLogger(__name__)


def import_command(args: argparse.Namespace, overrides: dict[str, Any]) -> int:
    """Convert a raw payload (plus optional ground truth) into canonical containers"""
    if overrides:
        logger.warning(f"import ignores config overrides: {sorted(overrides)}")
    destination = Path(args.out or settings.output_dir) / "data"

    try:
        descriptor = CubeDescriptor.model_validate(read_json(args.descriptor))
    except FileNotFoundError:
        raise ConfigError(f"Descriptor not found: {args.descriptor}", key="descriptor")
    cube = import_cube(args.payload, descriptor)
    if args.normalize:
        cube = normalize_cube(cube)
    export_cube(cube, destination)

    if args.gt_descriptor is not None:
        if args.gt_payload is None:
            raise ConfigError("--gt-descriptor needs --gt-payload", key="gt_payload")
        gt_descriptor = GroundTruthDescriptor.model_validate(read_json(args.gt_descriptor))
        gt = import_ground_truth(args.gt_payload, gt_descriptor)
        if (gt.height, gt.width) != (cube.height, cube.width):
            raise ConfigError("Ground truth and cube sizes differ", key="gt_descriptor")
        if args.subsample is not None:
            seed = args.seed if args.seed is not None else 0
            if seed < 0:
                raise ConfigError("--seed must be non-negative", key="seed")
            gt = subsample_classes(gt, args.subsample, derive_rng(seed, "subsample"))
        export_ground_truth(gt, destination)
        logger.info(f"Class counts: {gt.class_counts()}")
    elif args.subsample is not None:
        raise ConfigError("--subsample needs a ground truth", key="subsample")
    return 0


def make_splits_command(args: argparse.Namespace, overrides: dict[str, Any]) -> int:
    """Persist the split (and augmented-set manifest) of every run"""
    config = load_config(args, overrides)
    require_paths(config, ["target_cube", "target_gt"])
    service = get_experiment_service(config)
    service.snapshot_config()
    target = service.load_target()

    split_dir = service.output_dir / "splits"
    for run_index in range(config.n_runs):
        split = service.split_for_run(target.gt, run_index)
        SplitRepository.save(split, split_dir / f"run_{run_index:02d}.split.json")
        originals = {c: target.extractor.windows(split.labeled[c]) for c in sorted(split.labeled)}
        augmented = augment_labeled_set(
            originals,
            split.labeled,
            config.augmented_per_class,
            derive_rng(split.seed, "finetune/augment"),
        )
        write_json(split_dir / f"run_{run_index:02d}.augmented.json", augmented.manifest())
        logger.info(
            f"Run {run_index}: {split.labeled_count} labeled, {len(split.test)} test pixels"
        )
    return 0


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser(
        "import", help="Import a raw cube into canonical files", allow_abbrev=False
    )
    add_global_flags(parser, suppress=True)
    parser.add_argument("--descriptor", required=True, help="Layout descriptor JSON")
    parser.add_argument("--payload", required=True, help="Raw cube payload")
    parser.add_argument("--gt-descriptor", dest="gt_descriptor", default=None)
    parser.add_argument("--gt-payload", dest="gt_payload", default=None)
    parser.add_argument("--normalize", action="store_true", help="Per-band min-max scaling")
    parser.add_argument("--subsample", type=float, default=None, help="Per-class fraction to keep")
    parser.set_defaults(handler=import_command)

    parser = subparsers.add_parser(
        "make-splits", help="Build and persist per-run splits", allow_abbrev=False
    )
    add_global_flags(parser, suppress=True)
    parser.set_defaults(handler=make_splits_command)
