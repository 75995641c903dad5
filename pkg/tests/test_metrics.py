import numpy as np
import pytest
from PIL import Image

from s4lfsc.data import GroundTruthMap
from s4lfsc.exceptions import ContractError, MetricError, RenderError
from s4lfsc.metrics import (
    aggregate_runs,
    compute_metrics,
    default_palette,
    format_report_table,
    render_map,
)


def _brute_metrics(y_true, y_pred, n):
    confusion = [[0] * n for _ in range(n)]
    for t, p in zip(y_true, y_pred):
        confusion[t - 1][p - 1] += 1
    total = len(y_true)
    oa = sum(confusion[m][m] for m in range(n)) / total
    recalls = [confusion[m][m] / sum(confusion[m]) for m in range(n)]
    p_e = sum(sum(confusion[m]) * sum(row[m] for row in confusion) for m in range(n)) / total**2
    kappa = (oa - p_e) / (1 - p_e) if p_e != 1 else 1.0
    return oa, sum(recalls) / n, kappa


class TestComputeMetrics:
    """Test OA, AA and kappa"""

    def test_perfect(self):
        """Test a perfect prediction scores one everywhere"""
        labels = [1, 2, 3, 3, 2, 1]
        report = compute_metrics(labels, labels, 3)
        assert report.oa == report.aa == report.kappa == 1.0
        assert report.confusion == [[2, 0, 0], [0, 2, 0], [0, 0, 2]]

    def test_single_class_perfect(self):
        """Test a perfect one-class prediction has kappa 1"""
        report = compute_metrics([1, 1, 1], [1, 1, 1], 1)
        assert report.kappa == 1.0
        assert report.confusion == [[3]]

    def test_constant_predictor(self):
        """Test predicting one class gives kappa 0 for confusion [[50, 0], [50, 0]]"""
        report = compute_metrics([1] * 50 + [2] * 50, [1] * 100, 2)
        assert report.oa == 0.5
        assert report.aa == 0.5
        assert report.kappa == 0.0
        assert report.per_class_acc == [1.0, 0.0]

    def test_oracle(self):
        """Test agreement with a scalar re-implementation on random labels"""
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n = int(rng.integers(2, 9))
            y_true = np.concatenate([np.arange(1, n + 1), rng.integers(1, n + 1, size=40)])
            y_pred = rng.integers(1, n + 1, size=y_true.size)
            report = compute_metrics(y_true, y_pred, n)
            oa, aa, kappa = _brute_metrics(y_true.tolist(), y_pred.tolist(), n)
            assert report.oa == pytest.approx(oa, abs=1e-9)
            assert report.aa == pytest.approx(aa, abs=1e-9)
            assert report.kappa == pytest.approx(kappa, abs=1e-9)

    def test_relabeling_invariance(self):
        """Test permuting class ids leaves the scores unchanged"""
        rng = np.random.default_rng(1)
        y_true = np.concatenate([np.arange(1, 5), rng.integers(1, 5, size=60)])
        y_pred = rng.integers(1, 5, size=y_true.size)
        permutation = np.array([0, 3, 1, 4, 2])
        first = compute_metrics(y_true, y_pred, 4)
        second = compute_metrics(permutation[y_true], permutation[y_pred], 4)
        assert second.oa == pytest.approx(first.oa)
        assert second.aa == pytest.approx(first.aa)
        assert second.kappa == pytest.approx(first.kappa)

    def test_errors(self):
        """Test empty input, length mismatch and a class without test samples"""
        with pytest.raises(MetricError):
            compute_metrics([], [], 2)
        with pytest.raises(MetricError):
            compute_metrics([1, 2], [1], 2)
        with pytest.raises(MetricError):
            compute_metrics([1, 1], [1, 2], 2)


class TestAggregateRuns:
    """Test the multi-run summary"""

    def _report(self, oa_hits: int):
        # 100 samples of class 1 and one of class 2, oa_hits of the first correct
        y_true = [1] * 100 + [2]
        y_pred = [1] * oa_hits + [2] * (100 - oa_hits) + [2]
        return compute_metrics(y_true, y_pred, 2)

    def test_sample_std(self):
        """Test two per-class accuracies 0.90 and 0.94 give 0.92 +- 0.02828"""
        aggregate = aggregate_runs([self._report(90), self._report(94)])
        assert aggregate.per_class[0].mean == pytest.approx(0.92)
        assert aggregate.per_class[0].std == pytest.approx(0.028284271, abs=1e-8)
        assert aggregate.n_runs == 2

    def test_single_run(self):
        """Test one report has zero spread"""
        aggregate = aggregate_runs([self._report(90)], training_times=[3.0])
        assert aggregate.oa.std == 0.0
        assert aggregate.training_time_s.mean == 3.0

    def test_order_invariant(self):
        """Test report order does not change the summary"""
        reports = [self._report(h) for h in (80, 95, 90)]
        first = aggregate_runs(reports)
        second = aggregate_runs(reports[::-1])
        assert first.oa == second.oa and first.kappa == second.kappa

    def test_inconsistent_classes(self):
        """Test reports with different class counts cannot be aggregated"""
        other = compute_metrics([1, 2, 3], [1, 2, 3], 3)
        with pytest.raises(ContractError):
            aggregate_runs([self._report(90), other])

    def test_table_layout(self):
        """Test per-class rows then OA, AA and Kappa in percent"""
        table = format_report_table(aggregate_runs([self._report(90), self._report(94)]), "UP")
        lines = table.splitlines()
        assert lines[0] == "UP"
        labels = [line.split()[0] for line in lines if line and line[0] != "-"][2:]
        assert labels[:5] == ["1", "2", "OA", "AA", "Kappa"]
        assert "92.00 ±  2.83" in table


class TestRenderMap:
    """Test classification map rendering"""

    def _gt(self):
        labels = np.array([[0, 1, 1], [2, 2, 0], [1, 2, 0]])
        return GroundTruthMap(labels=labels, n_classes=2)

    def test_matches_palette(self, tmp_path):
        """Test labeled pixels take their predicted color and the rest stay black"""
        gt = self._gt()
        palette = {1: (255, 0, 0), 2: (0, 0, 255)}
        image = render_map(gt, gt.labels, tmp_path / "map.png", palette)

        assert image.shape == (3, 3, 3)
        assert tuple(image[0, 0]) == (0, 0, 0)
        assert tuple(image[0, 1]) == (255, 0, 0)
        assert tuple(image[1, 0]) == (0, 0, 255)
        np.testing.assert_array_equal(np.asarray(Image.open(tmp_path / "map.png")), image)

    def test_color_histogram(self, tmp_path):
        """Test pixel counts per color equal prediction counts"""
        gt = self._gt()
        predictions = np.where(gt.labels > 0, 1, 0)
        image = render_map(gt, predictions, tmp_path / "map.png")
        red = default_palette(2)[1]
        assert int(np.all(image == red, axis=-1).sum()) == 6

    def test_missing_palette_color(self, tmp_path):
        """Test a predicted class without a color cannot be rendered"""
        gt = self._gt()
        with pytest.raises(RenderError):
            render_map(gt, gt.labels, tmp_path / "map.png", {1: (1, 2, 3)})

    def test_missing_prediction(self, tmp_path):
        """Test a labeled pixel without prediction cannot be rendered"""
        gt = self._gt()
        with pytest.raises(RenderError):
            render_map(gt, np.zeros((3, 3), dtype=int), tmp_path / "map.png")
