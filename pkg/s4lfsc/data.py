"""Cube and ground-truth containers, ingestion, normalization and splits."""

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from s4lfsc.augment import noise_augment
from s4lfsc.exceptions import ConfigError, DataError, FormatError, SplitError
from s4lfsc.schemas import (
    AugmentedEntry,
    AugmentedSetManifest,
    CubeDescriptor,
    GroundTruthDescriptor,
    SplitSpec,
)
from s4lfsc.seeding import derive_rng

logger = logging.getLogger(__name__)

Coord = tuple[int, int]

_DTYPES = {
    "f32le": "<f4",
    "f32be": ">f4",
    "f64le": "<f8",
    "u16le": "<u2",
    "i16le": "<i2",
    "u8": "u1",
}

def _to_hwb(order: str) -> tuple[int, int, int]:
    """Permutation taking payload axes in `order` to [h][w][b]"""
    return (order.index("h"), order.index("w"), order.index("b"))


@dataclass
class HsiCube:
    """Height x width x bands reflectance array"""

    name: str
    values: np.ndarray
    normalized: bool = False

    def __post_init__(self) -> None:
        if self.values.ndim != 3:
            raise FormatError(f"Cube '{self.name}' must be 3-D, got shape {self.values.shape}")

    @property
    def height(self) -> int:
        return int(self.values.shape[0])

    @property
    def width(self) -> int:
        return int(self.values.shape[1])

    @property
    def bands(self) -> int:
        return int(self.values.shape[2])


@dataclass
class GroundTruthMap:
    """Per-pixel class ids, 0 = unlabeled"""

    labels: np.ndarray
    n_classes: int
    name: str = "gt"

    @property
    def height(self) -> int:
        return int(self.labels.shape[0])

    @property
    def width(self) -> int:
        return int(self.labels.shape[1])

    def validate(self) -> None:
        """
        Check the ground-truth invariants

        Raises:
            DataError: If a value is out of range or a class never occurs
        """
        if self.labels.ndim != 2:
            raise DataError(f"Ground truth must be 2-D, got shape {self.labels.shape}")
        if self.labels.min() < 0 or self.labels.max() > self.n_classes:
            raise DataError(f"Ground truth values must lie in [0, {self.n_classes}]")
        counts = np.bincount(self.labels.ravel(), minlength=self.n_classes + 1)
        missing = [c for c in range(1, self.n_classes + 1) if counts[c] == 0]
        if missing:
            raise DataError(f"Ground truth has no pixels for classes {missing}")

    def class_coords(self, class_id: int) -> np.ndarray:
        """Row-major (y, x) coordinates of a class, shape [n][2]"""
        ys, xs = np.nonzero(self.labels == class_id)
        return np.stack([ys, xs], axis=1)

    def class_counts(self) -> dict[int, int]:
        counts = np.bincount(self.labels.ravel(), minlength=self.n_classes + 1)
        return {c: int(counts[c]) for c in range(1, self.n_classes + 1)}


def import_cube(path: Union[str, Path], descriptor: CubeDescriptor) -> HsiCube:
    """
    Read a raw payload described by a layout descriptor

    Args:
        path: Raw payload file
        descriptor: Declares height/width/bands, element type and axis order

    Returns:
        Cube in canonical [h][w][b] float32 layout, normalized = False

    Raises:
        FormatError: If the payload size does not match the descriptor
        DataError: If any value is non-finite
    """
    payload = np.fromfile(path, dtype=np.dtype(_DTYPES[descriptor.dtype]))
    expected = descriptor.height * descriptor.width * descriptor.bands
    if payload.size != expected:
        raise FormatError(
            f"Cube '{descriptor.name}' descriptor declares {descriptor.height}x"
            f"{descriptor.width}x{descriptor.bands} = {expected} elements, "
            f"payload holds {payload.size}"
        )

    dims = {"h": descriptor.height, "w": descriptor.width, "b": descriptor.bands}
    shape = tuple(dims[axis] for axis in descriptor.order)
    values = payload.reshape(shape).transpose(_to_hwb(descriptor.order))
    values = np.ascontiguousarray(values, dtype=np.float32)

    if not np.all(np.isfinite(values)):
        raise DataError(f"Cube '{descriptor.name}' contains non-finite values")

    logger.info(f"Imported cube '{descriptor.name}' with shape {values.shape}")
    return HsiCube(name=descriptor.name, values=values, normalized=False)


def import_ground_truth(
    path: Union[str, Path], descriptor: GroundTruthDescriptor
) -> GroundTruthMap:
    """
    Read a u16le label payload and check the ground-truth invariants

    Raises:
        FormatError: If the payload size does not match the descriptor
        DataError: If a label is out of range or a class never occurs
    """
    payload = np.fromfile(path, dtype="<u2")
    expected = descriptor.height * descriptor.width
    if payload.size != expected:
        raise FormatError(
            f"Ground truth '{descriptor.name}' declares {expected} pixels, "
            f"payload holds {payload.size}"
        )
    gt = GroundTruthMap(
        labels=payload.reshape(descriptor.height, descriptor.width).astype(np.int64),
        n_classes=descriptor.n_classes,
        name=descriptor.name,
    )
    gt.validate()
    return gt


def normalize_cube(cube: HsiCube) -> HsiCube:
    """
    Per-band min-max scaling to [0, 1]

    Constant bands map to all zeros. Re-applying to a normalized cube
    returns an equal cube.
    """
    if cube.normalized:
        return cube

    values = cube.values.astype(np.float64)
    low = values.min(axis=(0, 1), keepdims=True)
    high = values.max(axis=(0, 1), keepdims=True)
    span = high - low
    constant = span == 0
    scaled = np.where(constant, 0.0, (values - low) / np.where(constant, 1.0, span))
    return HsiCube(name=cube.name, values=scaled.astype(np.float32), normalized=True)


def _round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def subsample_classes(
    gt: GroundTruthMap, fraction: float, rng: np.random.Generator
) -> GroundTruthMap:
    """
    Keep a fixed fraction of every class, dropping the rest to unlabeled

    Each class retains round-to-nearest(fraction x count) pixels, at least 1,
    chosen uniformly without replacement.

    Raises:
        ConfigError: If fraction is outside (0, 1]
        SplitError: If a class has no pixels to retain
    """
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(
            f"Subsample fraction must lie in (0, 1], got {fraction}", key="subsample_fraction"
        )

    flat = gt.labels.ravel()
    result = np.zeros_like(flat)
    for class_id in range(1, gt.n_classes + 1):
        indices = np.flatnonzero(flat == class_id)
        if indices.size == 0:
            raise SplitError(f"Class {class_id} would retain 0 pixels")
        keep = max(1, _round_half_up(fraction * indices.size))
        if keep < indices.size:
            indices = np.sort(rng.choice(indices, size=keep, replace=False))
        result[indices] = class_id

    return GroundTruthMap(
        labels=result.reshape(gt.labels.shape), n_classes=gt.n_classes, name=gt.name
    )


def build_splits(
    gt: GroundTruthMap, k0: int, seed: int, subsample_fraction: float = 1.0
) -> SplitSpec:
    """
    Draw K0 labeled pixels per class; the remainder becomes the test set

    Args:
        gt: Ground truth (already subsampled, if applicable)
        k0: Labeled samples per class
        seed: Split seed; equal inputs give identical splits
        subsample_fraction: Recorded in the SplitSpec for provenance

    Raises:
        SplitError: If a class has K0 or fewer pixels
    """
    rng = derive_rng(seed, "split")
    labeled: dict[int, list[Coord]] = {}
    test_flat: list[tuple[int, int]] = []

    for class_id in range(1, gt.n_classes + 1):
        coords = gt.class_coords(class_id)
        if coords.shape[0] <= k0:
            raise SplitError(
                f"Class {class_id} has {coords.shape[0]} pixels, needs more than K0={k0}"
            )
        order = rng.permutation(coords.shape[0])
        labeled[class_id] = [(int(y), int(x)) for y, x in coords[order[:k0]]]
        for y, x in coords[order[k0:]]:
            test_flat.append((int(y) * gt.width + int(x), class_id))

    test_flat.sort()
    test = [(flat // gt.width, flat % gt.width, class_id) for flat, class_id in test_flat]

    logger.info(
        f"Built split seed={seed}: {sum(len(v) for v in labeled.values())} labeled, "
        f"{len(test)} test"
    )
    return SplitSpec(
        seed=seed,
        k0=k0,
        subsample_fraction=subsample_fraction,
        n_classes=gt.n_classes,
        labeled=labeled,
        test=test,
    )


class _AugmentedClassView(Sequence):
    """Lazy per-class sequence of D_l1 patches, regenerated from their seeds"""

    def __init__(self, owner: "AugmentedLabeledSet", class_id: int):
        self._owner = owner
        self._class_id = class_id

    def __len__(self) -> int:
        return len(self._owner.entries[self._class_id])

    def __getitem__(self, index):  # type: ignore[override]
        if isinstance(index, slice):
            return [self[i] for i in range(*index.indices(len(self)))]
        return self._owner.patch(self._class_id, index)


@dataclass
class AugmentedLabeledSet:
    """
    Noise-augmented expansion of the labeled set (D_l1)

    Only the K0 originals are held in memory; augmented copies are
    regenerated on access from their recorded seeds, which keeps
    200-per-class sets of full-band patches affordable.
    """

    target_count: int
    originals: dict[int, np.ndarray]
    sources: dict[int, list[Coord]]
    entries: dict[int, list[AugmentedEntry]] = field(default_factory=dict)

    def patch(self, class_id: int, index: int) -> np.ndarray:
        entry = self.entries[class_id][index]
        position = self.sources[class_id].index(tuple(entry.source))
        original = self.originals[class_id][position]
        if entry.seed is None:
            return original
        return noise_augment(original, np.random.default_rng(entry.seed))

    def patches(self, class_id: int) -> np.ndarray:
        """All target_count patches of a class, shape [target_count][...]"""
        return np.stack([self.patch(class_id, i) for i in range(len(self.entries[class_id]))])

    def as_pool(self) -> dict[int, Sequence]:
        return {class_id: _AugmentedClassView(self, class_id) for class_id in self.entries}

    def manifest(self) -> AugmentedSetManifest:
        return AugmentedSetManifest(target_count=self.target_count, entries=self.entries)


def augment_labeled_set(
    originals: dict[int, np.ndarray],
    sources: dict[int, list[Coord]],
    target_count: int,
    rng: np.random.Generator,
) -> AugmentedLabeledSet:
    """
    Expand each class to target_count patches with noise-augmented copies

    Args:
        originals: Class id -> stacked K0 labeled patches
        sources: Class id -> the K0 source coordinates, aligned with originals
        target_count: Patches per class after expansion
        rng: Source of the per-copy augmentation seeds

    Raises:
        ConfigError: If target_count is below K0
    """
    entries: dict[int, list[AugmentedEntry]] = {}
    for class_id in sorted(originals):
        coords = [tuple(c) for c in sources[class_id]]
        k0 = len(coords)
        if target_count < k0:
            raise ConfigError(
                f"target_count {target_count} is below K0={k0}", key="augmented_per_class"
            )
        class_entries = [AugmentedEntry(source=c, seed=None) for c in coords]
        for copy_index in range(target_count - k0):
            seed = int(rng.integers(0, 2**63 - 1))
            class_entries.append(AugmentedEntry(source=coords[copy_index % k0], seed=seed))
        entries[class_id] = class_entries

    return AugmentedLabeledSet(
        target_count=target_count,
        originals={c: np.asarray(v, dtype=np.float32) for c, v in originals.items()},
        sources={c: [tuple(xy) for xy in v] for c, v in sources.items()},
        entries=entries,
    )


def class_pool_from_gt(cube: HsiCube, gt: GroundTruthMap) -> dict[int, np.ndarray]:
    """Labeled spectra grouped by class: class id -> [n][bands]"""
    pool: dict[int, np.ndarray] = {}
    for class_id in range(1, gt.n_classes + 1):
        coords = gt.class_coords(class_id)
        pool[class_id] = cube.values[coords[:, 0], coords[:, 1], :]
    return pool
