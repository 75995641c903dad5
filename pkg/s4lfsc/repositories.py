"""File-backed persistence for cubes, splits, checkpoints, run logs and reports."""

import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Any, Iterable, Optional, Union

import numpy as np
import torch
from pydantic import BaseModel
from tenacity import retry, retry_if_exception_type, stop_after_attempt, wait_exponential

from s4lfsc.data import GroundTruthMap, HsiCube, import_cube, import_ground_truth
from s4lfsc.exceptions import CheckpointError, DataError
from s4lfsc.schemas import CubeDescriptor, GroundTruthDescriptor, SplitSpec

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


@retry(
    stop=stop_after_attempt(3),
    wait=wait_exponential(multiplier=0.1, min=0.1, max=2),
    retry=retry_if_exception_type(OSError),
    reraise=True,
)
def atomic_write_bytes(path: PathLike, data: bytes) -> None:
    """Write to a temp file in the same directory, then rename over path"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path: PathLike, payload: Any) -> None:
    if isinstance(payload, BaseModel):
        text = payload.model_dump_json(indent=2)
    else:
        text = json.dumps(payload, indent=2)
    atomic_write_bytes(path, text.encode("utf-8"))


def read_json(path: PathLike) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _sidecar_paths(path: PathLike, kind: str) -> tuple[Path, Path]:
    """Resolve `<name>.<kind>.json` / `.bin` from either file or the bare stem"""
    path = Path(path)
    name = path.name
    for suffix in (f".{kind}.json", f".{kind}.bin"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
            break
    return path.with_name(f"{name}.{kind}.json"), path.with_name(f"{name}.{kind}.bin")


class CubeRepository:
    """Repository for `<name>.cube.json` + `<name>.cube.bin` containers"""

    def __init__(self, directory: PathLike):
        self.directory = Path(directory)

    def save(self, cube: HsiCube) -> Path:
        """Write a cube as f32le in [h][w][b] order; returns the sidecar path"""
        json_path, bin_path = _sidecar_paths(self.directory / cube.name, "cube")
        descriptor = CubeDescriptor(
            name=cube.name,
            height=cube.height,
            width=cube.width,
            bands=cube.bands,
            dtype="f32le",
            order="hwb",
            normalized=cube.normalized,
        )
        atomic_write_bytes(bin_path, cube.values.astype("<f4").tobytes(order="C"))
        write_json(json_path, descriptor)
        logger.info(f"Cube '{cube.name}' saved to {json_path}")
        return json_path

    @staticmethod
    def describe(path: PathLike) -> CubeDescriptor:
        """Descriptor of a stored cube without reading its payload"""
        json_path, _ = _sidecar_paths(path, "cube")
        return CubeDescriptor.model_validate(read_json(json_path))

    @staticmethod
    def load(path: PathLike) -> HsiCube:
        """Load a cube from its sidecar (or payload) path"""
        json_path, bin_path = _sidecar_paths(path, "cube")
        descriptor = CubeDescriptor.model_validate(read_json(json_path))
        cube = import_cube(bin_path, descriptor)
        cube.normalized = descriptor.normalized
        return cube


def export_cube(cube: HsiCube, directory: PathLike) -> Path:
    """Write the canonical cube container"""
    return CubeRepository(directory).save(cube)


class GroundTruthRepository:
    """Repository for `<name>.gt.json` + `<name>.gt.bin` (u16le) containers"""

    def __init__(self, directory: PathLike):
        self.directory = Path(directory)

    def save(self, gt: GroundTruthMap) -> Path:
        json_path, bin_path = _sidecar_paths(self.directory / gt.name, "gt")
        descriptor = GroundTruthDescriptor(
            name=gt.name, height=gt.height, width=gt.width, n_classes=gt.n_classes
        )
        atomic_write_bytes(bin_path, gt.labels.astype("<u2").tobytes(order="C"))
        write_json(json_path, descriptor)
        logger.info(f"Ground truth '{gt.name}' saved to {json_path}")
        return json_path

    @staticmethod
    def load(path: PathLike) -> GroundTruthMap:
        """
        Load and validate a ground-truth map

        Raises:
            FormatError: If the payload size does not match the descriptor
            DataError: If a ground-truth invariant fails
        """
        json_path, bin_path = _sidecar_paths(path, "gt")
        descriptor = GroundTruthDescriptor.model_validate(read_json(json_path))
        return import_ground_truth(bin_path, descriptor)


def export_ground_truth(gt: GroundTruthMap, directory: PathLike) -> Path:
    """Write the canonical ground-truth container"""
    return GroundTruthRepository(directory).save(gt)


class SplitRepository:
    """Repository for `<name>.split.json` documents"""

    @staticmethod
    def save(split: SplitSpec, path: PathLike) -> Path:
        path = Path(path)
        write_json(path, split)
        return path

    @staticmethod
    def load(path: PathLike) -> SplitSpec:
        return SplitSpec.model_validate(read_json(path))


def load_image_pool(directory: PathLike) -> dict[int, list[HsiCube]]:
    """
    Heterogeneous pool: one sub-directory per class, one `.cube` per item

    Class ids are assigned 1..n in sorted sub-directory order.

    Raises:
        DataError: If the directory holds no class with items
    """
    root = Path(directory)
    pool: dict[int, list[HsiCube]] = {}
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    for class_id, class_dir in enumerate(class_dirs, start=1):
        items = [CubeRepository.load(p) for p in sorted(class_dir.glob("*.cube.json"))]
        if items:
            pool[class_id] = items
    if not pool:
        raise DataError(f"No class sub-directories with .cube items under {root}")
    logger.info(
        f"Loaded heterogeneous pool from {root}: {len(pool)} classes, "
        f"{sum(len(v) for v in pool.values())} items"
    )
    return pool


class CheckpointRepository:
    """
    Named-tensor archives: `<stage>.ckpt.json` manifest + `<stage>.ckpt.bin`

    The manifest is a JSON list of {name, shape, offset} with byte offsets
    into a payload of concatenated little-endian float32 values.
    """

    def __init__(self, directory: PathLike):
        self.directory = Path(directory)

    def path_for(self, stage: str) -> Path:
        return self.directory / f"{stage}.ckpt.json"

    def save(self, stage: str, tensors: dict[str, torch.Tensor]) -> Path:
        return save_checkpoint(tensors, self.path_for(stage))

    def load(self, stage: str, include: Optional[Iterable[str]] = None) -> dict[str, torch.Tensor]:
        return load_checkpoint(self.path_for(stage), include)

    def exists(self, stage: str) -> bool:
        json_path, bin_path = _sidecar_paths(self.path_for(stage), "ckpt")
        return json_path.exists() and bin_path.exists()


def save_checkpoint(tensors: dict[str, torch.Tensor], path: PathLike) -> Path:
    """
    Write a tensor archive atomically

    Raises:
        CheckpointError: If names are not unique
    """
    json_path, bin_path = _sidecar_paths(path, "ckpt")
    manifest = []
    chunks = []
    offset = 0
    for name, tensor in tensors.items():
        array = tensor.detach().cpu().to(torch.float32).numpy().astype("<f4")
        manifest.append({"name": name, "shape": list(array.shape), "offset": offset})
        chunks.append(array.tobytes(order="C"))
        offset += array.nbytes
    if len({entry["name"] for entry in manifest}) != len(manifest):
        raise CheckpointError("Checkpoint tensor names must be unique")

    atomic_write_bytes(bin_path, b"".join(chunks))
    write_json(json_path, manifest)
    logger.info(f"Checkpoint with {len(manifest)} tensors written to {json_path}")
    return json_path


def load_checkpoint(
    path: PathLike, include: Optional[Iterable[str]] = None
) -> dict[str, torch.Tensor]:
    """
    Read a tensor archive, optionally keeping only names with given prefixes

    Raises:
        CheckpointError: If the manifest and payload are inconsistent
    """
    json_path, bin_path = _sidecar_paths(path, "ckpt")
    try:
        manifest = read_json(json_path)
        payload = np.fromfile(bin_path, dtype="<f4")
        payload_bytes = os.path.getsize(bin_path)
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Cannot read checkpoint {json_path}: {e}")

    if not isinstance(manifest, list):
        raise CheckpointError("Checkpoint manifest must be a JSON list")
    names = [entry.get("name") for entry in manifest]
    if len(set(names)) != len(names):
        raise CheckpointError("Checkpoint manifest has duplicate names")

    prefixes = tuple(include) if include is not None else None
    tensors: dict[str, torch.Tensor] = {}
    expected_offset = 0
    for entry in manifest:
        shape = tuple(int(d) for d in entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if entry["offset"] != expected_offset:
            raise CheckpointError(
                f"Tensor '{entry['name']}' offset {entry['offset']} != expected {expected_offset}"
            )
        start = expected_offset // 4
        expected_offset += 4 * count
        if expected_offset > payload_bytes:
            raise CheckpointError(f"Payload too short for tensor '{entry['name']}'")
        if prefixes is not None and not entry["name"].startswith(prefixes):
            continue
        values = payload[start : start + count].reshape(shape).copy()
        tensors[entry["name"]] = torch.from_numpy(values)

    if expected_offset != payload_bytes:
        raise CheckpointError(
            f"Payload holds {payload_bytes} bytes, manifest describes {expected_offset}"
        )
    return tensors


class RunLogRepository:
    """Line-delimited JSON run log, appended and flushed record by record"""

    def __init__(self, path: PathLike):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def reset(self) -> None:
        self.path.write_text("", encoding="utf-8")

    def append(self, record: BaseModel) -> None:
        with self.path.open("a", encoding="utf-8") as handle:
            handle.write(record.model_dump_json() + "\n")
            handle.flush()

    def read(self) -> list[dict[str, Any]]:
        if not self.path.exists():
            return []
        with self.path.open("r", encoding="utf-8") as handle:
            return [json.loads(line) for line in handle if line.strip()]


class ReportRepository:
    """report.json + report.txt under an output directory"""

    def __init__(self, directory: PathLike):
        self.directory = Path(directory)

    def save(self, report: BaseModel, table: Optional[str] = None, stem: str = "report") -> Path:
        json_path = self.directory / f"{stem}.json"
        write_json(json_path, report)
        if table is not None:
            atomic_write_bytes(self.directory / f"{stem}.txt", table.encode("utf-8"))
        return json_path
