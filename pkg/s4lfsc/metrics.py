"""Confusion-matrix metrics, multi-run aggregation and classification maps."""

import colorsys
import logging
from collections.abc import Mapping, Sequence
from pathlib import Path
from typing import Optional, Union

import numpy as np
from PIL import Image
from sklearn import metrics

from s4lfsc.data import GroundTruthMap
from s4lfsc.exceptions import ContractError, MetricError, RenderError
from s4lfsc.schemas import AggregateReport, MeanStd, MetricsReport

logger = logging.getLogger(__name__)

RGB = tuple[int, int, int]


def compute_metrics(
    y_true: Sequence[int], y_pred: Sequence[int], n_classes: int
) -> MetricsReport:
    """
    OA, AA (mean per-class recall) and Cohen's kappa

    Raises:
        MetricError: If inputs are empty, of unequal length, out of range,
            or a class has no true samples
    """
    true = np.asarray(y_true, dtype=np.int64)
    pred = np.asarray(y_pred, dtype=np.int64)
    if true.size == 0:
        raise MetricError("Cannot compute metrics on empty input")
    if true.shape != pred.shape:
        raise MetricError(f"Label length mismatch: {true.size} vs {pred.size}")
    for name, labels in (("true", true), ("predicted", pred)):
        if labels.min() < 1 or labels.max() > n_classes:
            raise MetricError(f"{name} labels must lie in 1..{n_classes}")

    class_ids = list(range(1, n_classes + 1))
    confusion = metrics.confusion_matrix(true, pred, labels=class_ids)
    row_sums = confusion.sum(axis=1)
    empty = [m + 1 for m in range(n_classes) if row_sums[m] == 0]
    if empty:
        raise MetricError(f"Classes {empty} have no test samples")

    n_test = int(true.size)
    per_class = np.diag(confusion) / row_sums
    oa = float(np.trace(confusion) / n_test)
    # chance agreement is 1 only when every label and prediction share one class
    kappa = 1.0 if oa == 1.0 else float(metrics.cohen_kappa_score(true, pred, labels=class_ids))

    return MetricsReport(
        confusion=confusion.tolist(),
        per_class_acc=[float(v) for v in per_class],
        oa=oa,
        aa=float(per_class.mean()),
        kappa=float(kappa),
        n_test=n_test,
    )


def _mean_std(values: Sequence[float]) -> MeanStd:
    array = np.asarray(values, dtype=np.float64)
    std = float(array.std(ddof=1)) if array.size > 1 else 0.0
    return MeanStd(mean=float(array.mean()), std=std)


def aggregate_runs(
    reports: Sequence[MetricsReport],
    training_times: Optional[Sequence[float]] = None,
    testing_times: Optional[Sequence[float]] = None,
) -> AggregateReport:
    """
    Mean and sample standard deviation (n - 1) of every metric

    Raises:
        ContractError: If no reports are given or class counts differ
    """
    if not reports:
        raise ContractError("Need at least one report to aggregate")
    n_classes = reports[0].n_classes
    if any(r.n_classes != n_classes for r in reports):
        raise ContractError("Reports disagree on the number of classes")

    per_class = [
        _mean_std([r.per_class_acc[m] for r in reports]) for m in range(n_classes)
    ]
    return AggregateReport(
        n_runs=len(reports),
        n_classes=n_classes,
        oa=_mean_std([r.oa for r in reports]),
        aa=_mean_std([r.aa for r in reports]),
        kappa=_mean_std([r.kappa for r in reports]),
        per_class=per_class,
        training_time_s=_mean_std(training_times) if training_times else None,
        testing_time_s=_mean_std(testing_times) if testing_times else None,
        runs=list(reports),
    )


def format_report_table(report: AggregateReport, title: str = "") -> str:
    """Plain-text table: one row per class, then OA, AA and Kappa (percent)"""

    def cell(value: MeanStd, scale: float = 100.0) -> str:
        return f"{value.mean * scale:6.2f} ± {value.std * scale:5.2f}"

    lines = []
    if title:
        lines.append(title)
    lines.append(f"{'Class':<8}{'Accuracy (%)':>18}")
    lines.append("-" * 26)
    for index, value in enumerate(report.per_class, start=1):
        lines.append(f"{index:<8}{cell(value):>18}")
    lines.append("-" * 26)
    lines.append(f"{'OA':<8}{cell(report.oa):>18}")
    lines.append(f"{'AA':<8}{cell(report.aa):>18}")
    lines.append(f"{'Kappa':<8}{cell(report.kappa):>18}")
    if report.training_time_s is not None:
        lines.append(f"{'Train s':<8}{cell(report.training_time_s, 1.0):>18}")
    if report.testing_time_s is not None:
        lines.append(f"{'Test s':<8}{cell(report.testing_time_s, 1.0):>18}")
    lines.append(f"({report.n_runs} runs, mean ± sample std)")
    return "\n".join(lines) + "\n"


def default_palette(n_classes: int) -> dict[int, RGB]:
    """Deterministic, evenly spread hues per class index"""
    palette: dict[int, RGB] = {}
    for class_id in range(1, n_classes + 1):
        hue = ((class_id - 1) * 0.618033988749895) % 1.0
        value = 1.0 if class_id % 2 else 0.75
        r, g, b = colorsys.hsv_to_rgb(hue, 0.85, value)
        palette[class_id] = (int(round(r * 255)), int(round(g * 255)), int(round(b * 255)))
    return palette


def render_map(
    gt: GroundTruthMap,
    predictions: np.ndarray,
    path: Union[str, Path],
    palette: Optional[Mapping[int, RGB]] = None,
) -> np.ndarray:
    """
    Write a PNG classification map and return its RGB array

    Unlabeled pixels are black; labeled pixels take the palette color of
    their predicted class.

    Raises:
        RenderError: If a labeled pixel has no prediction, shapes differ,
            or the palette lacks a predicted class
    """
    palette = dict(palette) if palette is not None else default_palette(gt.n_classes)
    predictions = np.asarray(predictions)
    if predictions.shape != gt.labels.shape:
        raise RenderError(f"Prediction shape {predictions.shape} != ground truth {gt.labels.shape}")
    labeled = gt.labels > 0
    if bool((predictions[labeled] <= 0).any()):
        raise RenderError("Some labeled pixels have no prediction")

    image = np.zeros(gt.labels.shape + (3,), dtype=np.uint8)
    for class_id in np.unique(predictions[labeled]):
        color = palette.get(int(class_id))
        if color is None:
            raise RenderError(f"Palette has no color for class {int(class_id)}")
        image[labeled & (predictions == class_id)] = color

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(image).save(path, format="PNG")
    logger.info(f"Classification map written to {path}")
    return image
