"""Per-image segmentation metrics and Table-style reports.

Accuracy is (tp + tn) / total, overlap rate is the Jaccard index
tp / (tp + fp + fn) and the F measure is 2PR / (P + R).
"""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .autodiff.tensor import Tensor

METRICS = ("accuracy", "overlap_rate", "f_measure")
METRIC_LABELS = {"accuracy": "accuracy", "overlap_rate": "overlap rate", "f_measure": "F measure"}
RECORD_HEADER = ("id", "accuracy", "overlap_rate", "f_measure")


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass(frozen=True)
class MetricRecord:
    id: str
    accuracy: float
    overlap_rate: float
    f_measure: float

    def get(self, metric: str) -> float:
        if metric not in METRICS:
            raise MetricError(f"unknown metric {metric!r}")
        return getattr(self, metric)


@dataclass(frozen=True)
class SummaryRow:
    metric: str
    minimum: float
    maximum: float
    mean: float
    std: float


def binarize(prediction, threshold: float = 0.0) -> np.ndarray:
    """1 where prediction > threshold (strict), else 0."""
    arr = prediction.data if isinstance(prediction, Tensor) else prediction
    return (np.asarray(arr) > threshold).astype(np.uint8)


def _as_binary(mask, name: str) -> np.ndarray:
    arr = np.asarray(mask)
    if not np.all((arr == 0) | (arr == 1)):
        raise MetricError(f"{name} is not a binary mask")
    return arr.astype(bool)


def confusion(pred_mask, gt_mask) -> ConfusionCounts:
    pred = _as_binary(pred_mask, "prediction")
    gt = _as_binary(gt_mask, "ground truth")
    if pred.shape != gt.shape:
        raise MetricError(f"mask dims differ: {pred.shape} vs {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tp, pred.size - tp - fp - fn, fp, fn)


def accuracy(c: ConfusionCounts) -> float:
    if c.total == 0:
        raise MetricError("accuracy of an empty image is undefined")
    return (c.tp + c.tn) / c.total


def overlap_rate(c: ConfusionCounts) -> float:
    union = c.tp + c.fp + c.fn
    if union == 0:
        return 1.0
    return c.tp / union


def f_measure(c: ConfusionCounts) -> float:
    if c.tp == 0:
        return 1.0 if c.fp == 0 and c.fn == 0 else 0.0
    p = c.tp / (c.tp + c.fp)
    r = c.tp / (c.tp + c.fn)
    return 2 * p * r / (p + r)


def metric_record(record_id: str, pred_mask, gt_mask) -> MetricRecord:
    c = confusion(pred_mask, gt_mask)
    return MetricRecord(record_id, accuracy(c), overlap_rate(c), f_measure(c))


def summarize(records: Sequence[MetricRecord], metric: str) -> SummaryRow:
    """Min / max / mean / sample standard deviation (n - 1) of one metric."""
    if not records:
        raise MetricError("cannot summarize an empty record list")
    vals = np.array([r.get(metric) for r in records], dtype=np.float64)
    std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
    mean = float(np.mean(vals))
    # clamp rounding so min <= mean <= max holds exactly
    mean = min(max(mean, float(vals.min())), float(vals.max()))
    return SummaryRow(metric, float(vals.min()), float(vals.max()), mean, std)


def summarize_all(records: Sequence[MetricRecord]) -> list[SummaryRow]:
    return [summarize(records, m) for m in METRICS]


# reports -------------------------------------------------------------------


def render_summary_table(rows: Iterable[SummaryRow]) -> str:
    """Tab-separated metric x {minimum, maximum, mean, standard deviation} table."""
    lines = ["\tminimum\tmaximum\tmean\tstandard deviation"]
    for r in rows:
        label = METRIC_LABELS.get(r.metric, r.metric)
        lines.append(f"{label}\t{r.minimum:.4f}\t{r.maximum:.4f}\t{r.mean:.4f}\t{r.std:.4f}")
    return "\n".join(lines) + "\n"


def format_duration(seconds: Optional[float]) -> str:
    if seconds is None or not math.isfinite(seconds):
        return "-"
    if seconds < 60:
        return f"{seconds:.2f}s"
    total = int(round(seconds))
    h, rem = divmod(total, 3600)
    m, s = divmod(rem, 60)
    if h:
        return f"{h}h{m:02d}min"
    return f"{m}min{s:02d}s"


@dataclass(frozen=True)
class MethodSummary:
    label: str
    rows: tuple[SummaryRow, ...]
    train_seconds: Optional[float] = None
    test_seconds: Optional[float] = None

    def row(self, metric: str) -> SummaryRow:
        for r in self.rows:
            if r.metric == metric:
                return r
        raise MetricError(f"{self.label}: no summary for {metric}")


def render_comparison_table(methods: Sequence[MethodSummary]) -> str:
    """Tab-separated method x {Accuracy, Overlap rate, F measure, Training time, Test time}."""
    lines = ["\tAccuracy\tOverlap rate\tF measure\tTraining time\tTest time"]
    for m in methods:
        cells = [f"{m.row(k).mean:.3f} ± {m.row(k).std:.3f}" for k in METRICS]
        cells += [format_duration(m.train_seconds), format_duration(m.test_seconds)]
        lines.append("\t".join([m.label] + cells))
    return "\n".join(lines) + "\n"


def records_csv(records: Sequence[MetricRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_HEADER)
    for r in records:
        w.writerow([r.id, f"{r.accuracy:.6f}", f"{r.overlap_rate:.6f}", f"{r.f_measure:.6f}"])
    return buf.getvalue()


def read_records_csv(path: os.PathLike) -> list[MetricRecord]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise MetricError(f"cannot read report {path}: {exc}") from exc
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != RECORD_HEADER:
        raise MetricError(f"{path}: expected header {','.join(RECORD_HEADER)}")
    records = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 4:
            raise MetricError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
        try:
            vals = [float(v) for v in row[1:]]
        except ValueError as exc:
            raise MetricError(f"{path}:{lineno}: {exc}") from exc
        if not all(0.0 <= v <= 1.0 for v in vals):
            raise MetricError(f"{path}:{lineno}: metric outside [0, 1]")
        records.append(MetricRecord(row[0], *vals))
    return records


def render_report(rows: Sequence[SummaryRow], records: Sequence[MetricRecord] = (),
                  comparison: Optional[Sequence[MethodSummary]] = None) -> tuple[str, str]:
    """Text table (summary, plus comparison when given) and per-record CSV."""
    text = render_summary_table(rows)
    if comparison:
        text += "\n" + render_comparison_table(comparison)
    return text, records_csv(records)
