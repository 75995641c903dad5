"""Stochastic input transformations.

Every function takes a caller-owned numpy Generator; rerunning with a
captured generator state reproduces outputs bitwise. Patch arguments may be
plain [H][W][B] windows or any object carrying a ``window`` attribute (such
as ``s4lfsc.sampler.Patch``); the result has the same kind as the input.
"""

import dataclasses
import math
from dataclasses import dataclass
from enum import IntEnum
from typing import Any, Sequence, TypeVar

import numpy as np
import torch
import torch.nn.functional as F

from s4lfsc.exceptions import ContractError, ShapeError

PatchLike = TypeVar("PatchLike")

NOISE_SCALE = 1.0 / 25.0
CROP_AREA = (0.7, 1.0)
CROP_ASPECT = (3.0 / 4.0, 4.0 / 3.0)


class RmTransform(IntEnum):
    """The rotation-mirror transform group"""

    IDENTITY = 1
    ROT90 = 2
    ROT180 = 3
    ROT270 = 4
    HFLIP = 5
    VFLIP = 6


ROTATION_MIRROR: tuple[int, ...] = tuple(int(t) for t in RmTransform)
ROTATION_ONLY: tuple[int, ...] = (1, 2, 3, 4)


def transform_set(name: str) -> tuple[int, ...]:
    """Transform ids of a named RM task variant"""
    if name == "rotation_mirror":
        return ROTATION_MIRROR
    if name == "rotation_only":
        return ROTATION_ONLY
    raise ContractError(f"Unknown transform set: {name}")


def _window_of(patch: Any) -> np.ndarray:
    return patch.window if hasattr(patch, "window") else patch


def _rewrap(patch: PatchLike, window: np.ndarray) -> PatchLike:
    if hasattr(patch, "window"):
        return dataclasses.replace(patch, window=window)  # type: ignore[type-var]
    return window  # type: ignore[return-value]


def rotate_mirror(window: np.ndarray, k: int) -> np.ndarray:
    """Apply transform k to the two leading (spatial) axes"""
    if k == RmTransform.IDENTITY:
        out = window
    elif k in (RmTransform.ROT90, RmTransform.ROT180, RmTransform.ROT270):
        out = np.rot90(window, k=k - 1, axes=(0, 1))
    elif k == RmTransform.HFLIP:
        out = window[:, ::-1]
    elif k == RmTransform.VFLIP:
        out = window[::-1, :]
    else:
        raise ContractError(f"Transform id must be in 1..6, got {k}")
    return np.ascontiguousarray(out)


def rm_transform(patch: PatchLike, k: int) -> PatchLike:
    """
    Rotate or mirror a square patch; the band axis is untouched

    Raises:
        ShapeError: If the patch is not square
    """
    window = _window_of(patch)
    if window.shape[0] != window.shape[1]:
        raise ShapeError(f"Patch must be square, got {window.shape[:2]}")
    return _rewrap(patch, rotate_mirror(window, k))


def rm_expand(
    batch: Sequence[PatchLike], transforms: Sequence[int] = ROTATION_MIRROR
) -> list[tuple[PatchLike, int]]:
    """Every transform of every input, input-major then k-ascending"""
    ordered = sorted(transforms)
    return [(rm_transform(patch, k), k) for patch in batch for k in ordered]


def noise_augment(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """alpha * x + n / 25 with alpha ~ U(0.9, 1.1) and n standard normal"""
    alpha = rng.uniform(0.9, 1.1)
    noise = rng.standard_normal(np.shape(x))
    dtype = x.dtype if np.issubdtype(np.asarray(x).dtype, np.floating) else np.float32
    return (alpha * np.asarray(x) + noise * NOISE_SCALE).astype(dtype)


@dataclass
class MaskedSpectrum:
    """Spectrum with a fixed fraction of bands zeroed (mask = 1 where zeroed)"""

    original: np.ndarray
    masked: np.ndarray
    mask: np.ndarray


def mask_count(bands: int, ratio: float) -> int:
    """Exact number of masked bands, floor(ratio * bands)"""
    if not 0.0 <= ratio <= 1.0:
        raise ContractError(f"Mask ratio must lie in [0, 1], got {ratio}")
    # guard against products like 0.29 * 100 = 28.999999999999996
    return min(bands, int(math.floor(ratio * bands + 1e-9)))


def mask_spectrum(x: np.ndarray, ratio: float, rng: np.random.Generator) -> MaskedSpectrum:
    """Zero exactly floor(ratio * B) bands chosen uniformly without replacement"""
    x = np.asarray(x)
    count = mask_count(x.shape[-1], ratio)
    mask = np.zeros(x.shape[-1], dtype=x.dtype if x.dtype.kind == "f" else np.float32)
    if count:
        mask[rng.choice(x.shape[-1], size=count, replace=False)] = 1
    return MaskedSpectrum(original=x, masked=x * (1 - mask), mask=mask)


def mask_batch(
    spectra: np.ndarray, ratio: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise mask_spectrum for a [n][B] batch; returns (masked, mask)"""
    n, bands = spectra.shape
    count = mask_count(bands, ratio)
    mask = np.zeros((n, bands), dtype=spectra.dtype)
    if count:
        chosen = np.argsort(rng.random((n, bands)), axis=1)[:, :count]
        np.put_along_axis(mask, chosen, 1, axis=1)
    return spectra * (1 - mask), mask


def resize_bicubic(window: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bicubic resize of the spatial axes of a [h][w][c] array"""
    tensor = torch.from_numpy(np.ascontiguousarray(window, dtype=np.float32))
    tensor = tensor.permute(2, 0, 1).unsqueeze(0)
    resized = F.interpolate(tensor, size=(height, width), mode="bicubic", align_corners=False)
    return resized.squeeze(0).permute(1, 2, 0).contiguous().numpy()


def random_resized_crop(window: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Crop a random area/aspect region and resize it back to the input size"""
    height, width = window.shape[:2]
    area = height * width
    for _ in range(10):
        target_area = area * rng.uniform(*CROP_AREA)
        aspect = rng.uniform(*CROP_ASPECT)
        crop_w = int(round(math.sqrt(target_area * aspect)))
        crop_h = int(round(math.sqrt(target_area / aspect)))
        if 0 < crop_w <= width and 0 < crop_h <= height:
            top = int(rng.integers(0, height - crop_h + 1))
            left = int(rng.integers(0, width - crop_w + 1))
            region = window[top : top + crop_h, left : left + crop_w]
            return resize_bicubic(region, height, width)
    return np.array(window, dtype=np.float32, copy=True)


def sslcl_augment(patch: PatchLike, rng: np.random.Generator) -> PatchLike:
    """
    One random view for the consistency task

    With probability 0.5 a random resized crop, followed (each independently
    at 0.5) by a horizontal flip, a vertical flip and a rotation by a uniform
    multiple of 90 degrees; otherwise noise_augment.
    """
    window = _window_of(patch)
    if window.shape[0] != window.shape[1]:
        raise ShapeError(f"Patch must be square, got {window.shape[:2]}")

    if rng.random() < 0.5:
        view = random_resized_crop(window, rng)
        if rng.random() < 0.5:
            view = rotate_mirror(view, RmTransform.HFLIP)
        if rng.random() < 0.5:
            view = rotate_mirror(view, RmTransform.VFLIP)
        if rng.random() < 0.5:
            view = rotate_mirror(view, 1 + int(rng.integers(0, 4)))
    else:
        view = noise_augment(window, rng)
    return _rewrap(patch, np.ascontiguousarray(view, dtype=np.float32))
