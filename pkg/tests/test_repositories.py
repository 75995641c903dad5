import json

import numpy as np
import pytest
import torch

from s4lfsc.data import build_splits
from s4lfsc.exceptions import CheckpointError, DataError, FormatError
from s4lfsc.metrics import aggregate_runs, compute_metrics
from s4lfsc.repositories import (
    CheckpointRepository,
    CubeRepository,
    GroundTruthRepository,
    ReportRepository,
    RunLogRepository,
    SplitRepository,
    atomic_write_bytes,
    load_checkpoint,
    load_image_pool,
    save_checkpoint,
)
from s4lfsc.schemas import StageId, StepRecord
from tests.helpers import image_pool


class TestCubeRepository:
    """Test cube containers"""

    def test_round_trip(self, tmp_path, scene):
        """Test values, shape and the normalized flag survive a save"""
        cube, _ = scene
        cube.normalized = True
        path = CubeRepository(tmp_path).save(cube)

        assert path.name == "scene.cube.json"
        assert (tmp_path / "scene.cube.bin").stat().st_size == cube.values.size * 4
        loaded = CubeRepository.load(path)
        np.testing.assert_array_equal(loaded.values, cube.values)
        assert loaded.normalized is True

    def test_describe(self, tmp_path, scene):
        """Test reading the descriptor alone"""
        cube, _ = scene
        CubeRepository(tmp_path).save(cube)
        descriptor = CubeRepository.describe(tmp_path / "scene.cube.bin")
        assert (descriptor.height, descriptor.width, descriptor.bands) == (20, 20, 16)


class TestGroundTruthRepository:
    """Test ground-truth containers"""

    def test_round_trip(self, tmp_path, scene):
        """Test labels survive as u16le"""
        _, gt = scene
        path = GroundTruthRepository(tmp_path).save(gt)
        loaded = GroundTruthRepository.load(path)
        np.testing.assert_array_equal(loaded.labels, gt.labels)
        assert loaded.n_classes == 3
        assert (tmp_path / "scene.gt.bin").stat().st_size == gt.labels.size * 2

    def test_short_payload(self, tmp_path, scene):
        """Test a payload of the wrong size is a format error"""
        _, gt = scene
        GroundTruthRepository(tmp_path).save(gt)
        payload = tmp_path / "scene.gt.bin"
        payload.write_bytes(payload.read_bytes()[:-2])
        with pytest.raises(FormatError):
            GroundTruthRepository.load(tmp_path / "scene.gt.json")

    def test_invalid_labels(self, tmp_path, scene):
        """Test a class id above n_classes is a data error"""
        _, gt = scene
        GroundTruthRepository(tmp_path).save(gt)
        descriptor = json.loads((tmp_path / "scene.gt.json").read_text())
        descriptor["n_classes"] = 2
        (tmp_path / "scene.gt.json").write_text(json.dumps(descriptor))
        with pytest.raises(DataError):
            GroundTruthRepository.load(tmp_path / "scene.gt.json")


class TestSplitRepository:
    """Test split documents"""

    def test_round_trip(self, tmp_path, scene):
        """Test the split reloads unchanged"""
        _, gt = scene
        split = build_splits(gt, k0=3, seed=11)
        path = SplitRepository.save(split, tmp_path / "run_00.split.json")
        assert SplitRepository.load(path) == split


class TestImagePool:
    """Test heterogeneous pool loading"""

    def test_class_ids_follow_directory_order(self, tmp_path):
        """Test sub-directories become classes 1..n in sorted order"""
        for class_id, items in image_pool(n_classes=2, per_class=3, size=9).items():
            repository = CubeRepository(tmp_path / f"class_{class_id:02d}")
            for item in items:
                repository.save(item)
        (tmp_path / "class_03").mkdir()

        pool = load_image_pool(tmp_path)

        assert sorted(pool) == [1, 2]
        assert [len(items) for items in pool.values()] == [3, 3]
        assert pool[1][0].values.shape == (9, 9, 3)

    def test_empty_directory(self, tmp_path):
        """Test a pool without items is a data error"""
        with pytest.raises(DataError):
            load_image_pool(tmp_path)


class TestCheckpointRepository:
    """Test manifest consistency checks"""

    def test_exists_and_order(self, tmp_path):
        """Test manifest order and byte offsets"""
        repository = CheckpointRepository(tmp_path)
        assert not repository.exists("spatial")
        tensors = {"a/w": torch.ones(2, 3), "b/bias": torch.arange(4.0)}
        repository.save("spatial", tensors)

        assert repository.exists("spatial")
        manifest = json.loads((tmp_path / "spatial.ckpt.json").read_text())
        assert [entry["name"] for entry in manifest] == ["a/w", "b/bias"]
        assert [entry["offset"] for entry in manifest] == [0, 24]
        torch.testing.assert_close(repository.load("spatial")["b/bias"], torch.arange(4.0))

    def test_duplicate_names(self, tmp_path):
        """Test a manifest listing a name twice"""
        path = save_checkpoint({"a": torch.ones(1), "b": torch.ones(1)}, tmp_path / "x")
        manifest = json.loads(path.read_text())
        manifest[1]["name"] = "a"
        path.write_text(json.dumps(manifest))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_bad_offset(self, tmp_path):
        """Test a manifest offset that skips bytes"""
        path = save_checkpoint({"a": torch.ones(2), "b": torch.ones(2)}, tmp_path / "x")
        manifest = json.loads(path.read_text())
        manifest[1]["offset"] = 12
        path.write_text(json.dumps(manifest))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_trailing_bytes(self, tmp_path):
        """Test a payload longer than the manifest describes"""
        path = save_checkpoint({"a": torch.ones(2)}, tmp_path / "x")
        payload = tmp_path / "x.ckpt.bin"
        payload.write_bytes(payload.read_bytes() + b"\x00" * 4)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_missing_archive(self, tmp_path):
        """Test reading an archive that does not exist"""
        with pytest.raises(CheckpointError):
            CheckpointRepository(tmp_path).load("finetune")


class TestRunLogRepository:
    """Test line-delimited run logs"""

    def test_append_read_reset(self, tmp_path):
        """Test records append in order and reset empties the log"""
        log = RunLogRepository(tmp_path / "runs" / "runlog.jsonl")
        assert log.read() == []
        for episode in (1, 2):
            log.append(
                StepRecord(stage=StageId.SPATIAL, episode=episode, losses={"fsl": 1.0}, total=1.0)
            )

        records = log.read()
        assert [r["episode"] for r in records] == [1, 2]
        assert records[0]["type"] == "step"
        log.reset()
        assert log.read() == []


class TestReports:
    """Test report files and atomic writes"""

    def test_report_and_table(self, tmp_path):
        """Test report.json and report.txt are written side by side"""
        aggregate = aggregate_runs([compute_metrics([1, 2], [1, 2], 2)])
        path = ReportRepository(tmp_path).save(aggregate, "table\n")
        assert json.loads(path.read_text())["n_runs"] == 1
        assert (tmp_path / "report.txt").read_text() == "table\n"

    def test_atomic_write_leaves_no_temp_files(self, tmp_path):
        """Test the final file replaces the old one without leftovers"""
        target = tmp_path / "out" / "file.bin"
        atomic_write_bytes(target, b"first")
        atomic_write_bytes(target, b"second")
        assert target.read_bytes() == b"second"
        assert [p.name for p in target.parent.iterdir()] == ["file.bin"]
