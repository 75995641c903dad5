"""Patch extraction and N-way K-shot episodic sampling."""

import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from s4lfsc.augment import resize_bicubic
from s4lfsc.data import HsiCube
from s4lfsc.exceptions import ConfigError, ContractError, EpisodeError

logger = logging.getLogger(__name__)

PATCH_SIZE = 33


@dataclass
class Patch:
    """Spatial window centered on a pixel"""

    window: np.ndarray
    center: tuple[int, int]
    label: Optional[int] = None


def _check_size(cube: HsiCube, size: int) -> None:
    if size % 2 == 0:
        raise ConfigError(f"Patch size must be odd, got {size}", key="patch_size")
    if size > 2 * min(cube.height, cube.width):
        raise ConfigError(
            f"Patch size {size} exceeds twice the smaller cube side "
            f"({cube.height}x{cube.width})",
            key="patch_size",
        )


class PatchExtractor:
    """Mirror-padded view of a cube serving windows around any pixel"""

    def __init__(self, cube: HsiCube, size: int = PATCH_SIZE):
        _check_size(cube, size)
        self.cube = cube
        self.size = size
        self.radius = size // 2
        r = self.radius
        # reflect = mirror without repeating the border pixel
        self.padded = np.pad(cube.values, ((r, r), (r, r), (0, 0)), mode="reflect")

    def window(self, y: int, x: int) -> np.ndarray:
        if not (0 <= y < self.cube.height and 0 <= x < self.cube.width):
            raise ContractError(
                f"Pixel ({y}, {x}) outside cube {self.cube.height}x{self.cube.width}"
            )
        return self.padded[y : y + self.size, x : x + self.size].copy()

    def windows(self, coords: Sequence[tuple[int, int]]) -> np.ndarray:
        """Stacked windows, shape [n][size][size][bands]"""
        if len(coords) == 0:
            return np.zeros((0, self.size, self.size, self.cube.bands), dtype=np.float32)
        return np.stack([self.window(int(y), int(x)) for y, x in coords])

    def patch(self, y: int, x: int, label: Optional[int] = None) -> Patch:
        return Patch(window=self.window(y, x), center=(y, x), label=label)


def extract_patch(
    cube: HsiCube, y: int, x: int, size: int = PATCH_SIZE, label: Optional[int] = None
) -> Patch:
    """
    Window of size x size centered on (y, x) with mirror padding at borders

    Raises:
        ConfigError: If size is even or larger than 2 x min(height, width)
    """
    return PatchExtractor(cube, size).patch(y, x, label)


def center_spectrum(patch: Any) -> np.ndarray:
    """Independent copy of the center pixel spectrum"""
    window = patch.window if hasattr(patch, "window") else patch
    cy, cx = window.shape[0] // 2, window.shape[1] // 2
    return np.array(window[cy, cx, :], copy=True)


def resize_item(values: np.ndarray, size: int = PATCH_SIZE) -> np.ndarray:
    """Bicubic resize of a heterogeneous image to size x size"""
    if values.shape[0] == size and values.shape[1] == size:
        return np.asarray(values, dtype=np.float32)
    return resize_bicubic(values, size, size)


@dataclass(frozen=True)
class EpisodeEntry:
    """Reference to one pool item with its episode-local label"""

    class_id: int
    index: int
    local_label: int


@dataclass
class Episode:
    """N-way K-shot task with C queries per class"""

    ways: int
    shots: int
    queries_per_class: int
    support: list[EpisodeEntry] = field(default_factory=list)
    query: list[EpisodeEntry] = field(default_factory=list)
    class_map: dict[int, int] = field(default_factory=dict)

    @property
    def support_labels(self) -> np.ndarray:
        return np.array([e.local_label for e in self.support], dtype=np.int64)

    @property
    def query_labels(self) -> np.ndarray:
        return np.array([e.local_label for e in self.query], dtype=np.int64)

    @staticmethod
    def gather(pool: Mapping[int, Sequence], entries: Sequence[EpisodeEntry]) -> np.ndarray:
        """Stack the referenced pool items"""
        return np.stack([np.asarray(pool[e.class_id][e.index]) for e in entries])


def sample_episode(
    pool: Mapping[int, Sequence],
    n_ways: int,
    shots: int,
    queries: int,
    rng: np.random.Generator,
) -> Episode:
    """
    Draw an episode: N classes, then K + C distinct items per class

    Local labels follow class draw order; the first K items of a class go to
    the support set and the remaining C to the query set.

    Raises:
        EpisodeError: If the pool has fewer than N classes or a class has
            fewer than K + C items
    """
    classes = sorted(pool)
    if len(classes) < n_ways:
        raise EpisodeError(f"Pool has {len(classes)} classes, episode needs {n_ways}")
    per_class = shots + queries
    for class_id in classes:
        if len(pool[class_id]) < per_class:
            raise EpisodeError(
                f"Class {class_id} has {len(pool[class_id])} items, "
                f"episode needs {per_class}",
                class_id=class_id,
            )

    chosen = rng.choice(len(classes), size=n_ways, replace=False)
    episode = Episode(ways=n_ways, shots=shots, queries_per_class=queries)
    for local_label, position in enumerate(chosen):
        class_id = classes[int(position)]
        episode.class_map[local_label] = class_id
        picks = rng.choice(len(pool[class_id]), size=per_class, replace=False)
        for rank, index in enumerate(picks):
            entry = EpisodeEntry(class_id=class_id, index=int(index), local_label=local_label)
            (episode.support if rank < shots else episode.query).append(entry)

    episode.support.sort(key=lambda e: e.local_label)
    episode.query.sort(key=lambda e: e.local_label)
    return episode


def restrict_pool(
    pool: Mapping[int, np.ndarray], min_items: int, cap: int, rng: np.random.Generator
) -> dict[int, np.ndarray]:
    """
    Keep classes with more than min_items items, each capped at cap items

    Items are drawn uniformly without replacement, once per call.
    """
    restricted: dict[int, np.ndarray] = {}
    for class_id in sorted(pool):
        items = pool[class_id]
        if len(items) <= min_items:
            continue
        if len(items) > cap:
            picks = np.sort(rng.choice(len(items), size=cap, replace=False))
            items = items[picks]
        restricted[class_id] = items
    logger.info(
        f"Restricted pool to {len(restricted)} of {len(pool)} classes "
        f"(> {min_items} items, capped at {cap})"
    )
    return restricted
