"""Synthetic scenes, pools and configs shared by the tests"""

from pathlib import Path
from typing import Any, Optional

import numpy as np

from s4lfsc.config import deep_merge
from s4lfsc.data import GroundTruthMap, HsiCube
from s4lfsc.repositories import CubeRepository, GroundTruthRepository
from s4lfsc.schemas import ExperimentConfig


def synthetic_scene(
    height: int = 20,
    width: int = 20,
    bands: int = 16,
    n_classes: int = 3,
    seed: int = 0,
    unlabeled_rows: int = 4,
    noise: float = 0.02,
    name: str = "scene",
) -> tuple[HsiCube, GroundTruthMap]:
    """
    Vertical class stripes with well-separated spectral signatures

    The first `unlabeled_rows` rows are background (label 0) with a dark
    signature. Every pixel gets mild Gaussian texture.
    """
    rng = np.random.default_rng(seed)
    columns = np.arange(width) * n_classes // width + 1
    labels = np.tile(columns, (height, 1)).astype(np.int64)
    labels[:unlabeled_rows] = 0

    signatures = np.zeros((n_classes + 1, bands))
    signatures[0] = 0.05
    grid = np.linspace(0.0, np.pi, bands)
    for class_id in range(1, n_classes + 1):
        signatures[class_id] = 0.5 + 0.4 * np.sin(grid * class_id + class_id)
    values = signatures[labels] + noise * rng.standard_normal((height, width, bands))
    cube = HsiCube(name=name, values=values.astype(np.float32))
    gt = GroundTruthMap(labels=labels, n_classes=n_classes, name=name)
    return cube, gt


def image_pool(
    n_classes: int = 3, per_class: int = 6, size: int = 33, seed: int = 0
) -> dict[int, list[HsiCube]]:
    """3-channel images whose color and stripe frequency depend on the class"""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    pool: dict[int, list[HsiCube]] = {}
    for class_id in range(1, n_classes + 1):
        base = np.stack(
            [np.sin(2 * np.pi * class_id * xx), np.cos(2 * np.pi * class_id * yy), xx * yy],
            axis=-1,
        )
        pool[class_id] = [
            HsiCube(
                name=f"item{i:02d}",
                values=(base + 0.05 * rng.standard_normal(base.shape)).astype(np.float32),
            )
            for i in range(per_class)
        ]
    return pool


def write_datasets(
    root: Path,
    target_size: tuple[int, int, int] = (20, 20, 16),
    homo_bands: int = 128,
    hetero_per_class: int = 6,
    hetero_size: int = 33,
    n_classes: int = 3,
    seed: int = 0,
) -> dict[str, str]:
    """Write target, homogeneous and heterogeneous data; returns config paths"""
    height, width, bands = target_size
    cube, gt = synthetic_scene(height, width, bands, n_classes, seed, name="target")
    target_cube = CubeRepository(root).save(cube)
    target_gt = GroundTruthRepository(root).save(gt)

    homo, homo_labels = synthetic_scene(
        20, 20, homo_bands, n_classes, seed + 1, unlabeled_rows=0, name="homo"
    )
    homo_cube = CubeRepository(root).save(homo)
    homo_gt = GroundTruthRepository(root).save(homo_labels)

    hetero_root = root / "hetero"
    for class_id, items in image_pool(n_classes, hetero_per_class, hetero_size, seed).items():
        repository = CubeRepository(hetero_root / f"class_{class_id:02d}")
        for item in items:
            repository.save(item)

    return {
        "target_cube": str(target_cube),
        "target_gt": str(target_gt),
        "hetero_pool": str(hetero_root),
        "homo_cube": str(homo_cube),
        "homo_gt": str(homo_gt),
    }


def tiny_config(
    paths: dict[str, str], output_dir: Path, updates: Optional[dict[str, Any]] = None
) -> ExperimentConfig:
    """A few episodes per stage on the synthetic data"""
    base: dict[str, Any] = {
        "target": "custom",
        "paths": paths,
        "output_dir": str(output_dir),
        "k0": 2,
        "n_runs": 1,
        "base_seed": 7,
        "augmented_per_class": 8,
        "eval_batch_size": 64,
        "spatial": {"stage": "spatial", "episodes": 2, "rm_batch": 2, "queries": 3},
        "spectral": {
            "stage": "spectral",
            "episodes": 2,
            "mr_batch": 16,
            "queries": 3,
            "min_class_items": 10,
            "items_per_class": 30,
        },
        "finetune": {"stage": "finetune", "episodes": 2, "eval_every": 1, "queries": 3},
    }
    return ExperimentConfig.model_validate(deep_merge(base, updates or {}))
