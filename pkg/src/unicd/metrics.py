"""Confusion-matrix accounting and the evaluation metrics for each task.

Matrices are indexed ``cm[reference, prediction]``.  Ratios whose
denominator is zero evaluate to 0 and raise a named degeneracy flag instead.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .losses import IGNORE_INDEX


class ConfusionMatrix:
    """Mergeable K x K pixel counts of (reference, prediction) pairs."""

    def __init__(self, num_classes: int, counts: np.ndarray | None = None):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64) if counts is None else counts

    @classmethod
    def from_maps(cls, reference, prediction, num_classes: int, ignore_index: int = IGNORE_INDEX):
        return cls(num_classes).update(reference, prediction, ignore_index)

    def update(self, reference, prediction, ignore_index: int = IGNORE_INDEX) -> "ConfusionMatrix":
        ref = np.asarray(reference).ravel().astype(np.int64)
        pred = np.asarray(prediction).ravel().astype(np.int64)
        if ref.shape != pred.shape:
            raise ValueError(f"reference {ref.shape} and prediction {pred.shape} differ")
        keep = ref != ignore_index
        ref, pred = ref[keep], pred[keep]
        k = self.num_classes
        if ref.size and (ref.min() < 0 or ref.max() >= k or pred.min() < 0 or pred.max() >= k):
            raise ValueError(f"labels must lie in [0, {k})")
        self.counts += np.bincount(ref * k + pred, minlength=k * k).reshape(k, k)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge matrices of different sizes")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def _ratio(num: float, den: float, flags: list[str], name: str) -> float:
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


@dataclass
class BinaryMetrics:
    precision: float
    recall: float
    f1: float
    iou: float
    flags: list[str] = field(default_factory=list)

    @property
    def degenerate(self) -> bool:
        return bool(self.flags)


def binary_metrics(cm) -> BinaryMetrics:
    """Precision, recall, F1 and IoU of class 1 from a 2 x 2 matrix."""
    c = np.asarray(getattr(cm, "counts", cm))
    tp, fp, fn = int(c[1, 1]), int(c[0, 1]), int(c[1, 0])
    flags: list[str] = []
    pre = _ratio(tp, tp + fp, flags, "precision")
    rec = _ratio(tp, tp + fn, flags, "recall")
    f1 = _ratio(2 * tp, 2 * tp + fp + fn, flags, "f1")
    iou = _ratio(tp, tp + fp + fn, flags, "iou")
    return BinaryMetrics(pre, rec, f1, iou, flags)


def kappa(c: np.ndarray, flags: list[str] | None = None, name: str = "kappa") -> float:
    """Cohen's kappa of a square count matrix."""
    flags = [] if flags is None else flags
    c = np.asarray(c, dtype=np.float64)
    n = c.sum()
    if n == 0:
        flags.append(name)
        return 0.0
    po = np.trace(c) / n
    pe = float((c.sum(0) * c.sum(1)).sum()) / (n * n)
    return _ratio(po - pe, 1.0 - pe, flags, name)


@dataclass
class ScdMetrics:
    oa: float
    miou: float
    sek: float
    f1: float
    kappa: float
    iou_nochange: float
    iou_change: float
    flags: list[str] = field(default_factory=list)


def scd_metrics(cm) -> ScdMetrics:
    """Semantic change metrics from a (K+1) x (K+1) matrix where class 0 means no change.

    The matrix should accumulate both dates.  mIoU averages the no-change
    and pooled-change IoUs of the 2 x 2 collapse; SeK is
    ``exp(IoU_change - 1) * kappa`` with kappa taken after zeroing the
    (no-change, no-change) cell; F1 is the harmonic mean of semantic-change
    precision and recall.
    """
    c = np.asarray(getattr(cm, "counts", cm)).astype(np.int64)
    flags: list[str] = []
    total = int(c.sum())
    if total == 0:
        return ScdMetrics(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, ["empty"])
    oa = np.trace(c) / total
    nn = int(c[0, 0])
    ref_nc = int(c[0, :].sum())
    pred_nc = int(c[:, 0].sum())
    cc = int(c[1:, 1:].sum())
    iou_nc = _ratio(nn, ref_nc + pred_nc - nn, flags, "iou_nochange")
    union_c = (total - ref_nc) + (total - pred_nc) - cc
    iou_c = _ratio(cc, union_c, flags, "iou_change")
    q = c.copy()
    q[0, 0] = 0
    k = kappa(q, flags, "sek")
    sek = math.exp(iou_c - 1.0) * k
    sc_tp = int(np.trace(c[1:, 1:]))
    pre = _ratio(sc_tp, total - pred_nc, flags, "scd_precision")
    rec = _ratio(sc_tp, total - ref_nc, flags, "scd_recall")
    f1 = _ratio(2 * pre * rec, pre + rec, flags, "f1_scd")
    return ScdMetrics(float(oa), (iou_nc + iou_c) / 2, sek, f1, k, iou_nc, iou_c, flags)


def harmonic_mean(values) -> float:
    values = list(values)
    if not values:
        return 0.0
    if any(v == 0 for v in values):
        return 0.0
    return len(values) / sum(1.0 / v for v in values)


@dataclass
class BdaMetrics:
    f1_loc: float
    f1_damage: list[float]
    f1_clf: float
    f1_overall: float
    flags: list[str] = field(default_factory=list)


def bda_metrics(loc_ref, loc_pred, dmg_ref, dmg_pred, levels: int = 4,
                ignore_index: int = IGNORE_INDEX) -> BdaMetrics:
    """Building localization F1, per-grade damage F1 on reference building pixels, and their blend.

    Damage grades are 1..levels.  A grade absent from both reference and
    prediction is left out of the harmonic mean and flagged.  Overall is
    ``0.3 * loc + 0.7 * clf``.
    """
    loc_ref, loc_pred = np.asarray(loc_ref), np.asarray(loc_pred)
    flags: list[str] = []
    loc = binary_metrics(ConfusionMatrix.from_maps(loc_ref, loc_pred, 2, ignore_index))
    flags += [f"loc_{f}" for f in loc.flags]
    on = (loc_ref == 1)
    ref = np.asarray(dmg_ref)[on]
    pred = np.asarray(dmg_pred)[on]
    keep = ref != ignore_index
    ref, pred = ref[keep], pred[keep]
    per_class, used = [], []
    for c in range(1, levels + 1):
        r, p = ref == c, pred == c
        tp = int((r & p).sum())
        fp = int((~r & p).sum())
        fn = int((r & ~p).sum())
        if tp + fp + fn == 0:
            flags.append(f"damage_{c}_absent")
            per_class.append(0.0)
            continue
        f = 2 * tp / (2 * tp + fp + fn)
        per_class.append(f)
        used.append(f)
    if not used:
        flags.append("f1_clf")
    clf = harmonic_mean(used)
    return BdaMetrics(loc.f1, per_class, clf, 0.3 * loc.f1 + 0.7 * clf, flags)


@dataclass
class MetricReport:
    dataset: str
    task: str
    values: dict[str, float]
    flags: list[str] = field(default_factory=list)

    def rows(self) -> list[tuple[str, str, str, float]]:
        return [(self.dataset, self.task, k, v) for k, v in self.values.items()]

    def to_csv(self, header: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow(["dataset", "task", "metric", "value"])
        for row in self.rows():
            w.writerow([*row[:3], repr(float(row[3]))])
        return buf.getvalue()

    def table(self) -> str:
        width = max(len(k) for k in self.values) if self.values else 6
        lines = [f"{self.dataset} [{self.task}]"]
        lines += [f"  {k:<{width}}  {v:8.4f}" for k, v in self.values.items()]
        if self.flags:
            lines.append(f"  degenerate: {', '.join(self.flags)}")
        return "\n".join(lines)


def report_from(dataset: str, task: str, m) -> MetricReport:
    if isinstance(m, BinaryMetrics):
        vals = {"precision": m.precision, "recall": m.recall, "f1": m.f1, "iou": m.iou}
    elif isinstance(m, ScdMetrics):
        vals = {"oa": m.oa, "miou": m.miou, "sek": m.sek, "f1_scd": m.f1}
    elif isinstance(m, BdaMetrics):
        vals = {"f1_loc": m.f1_loc}
        vals.update({f"f1_damage_{i + 1}": v for i, v in enumerate(m.f1_damage)})
        vals.update({"f1_clf": m.f1_clf, "f1_overall": m.f1_overall})
    else:
        raise TypeError(f"unsupported metric record {type(m).__name__}")
    return MetricReport(dataset, task, vals, list(m.flags))


def comparison_table(reports: list[MetricReport]) -> str:
    """One row per report (variant), one column per metric."""
    if not reports:
        return ""
    names = list(reports[0].values)
    wid = max(len(r.dataset) for r in reports)
    head = f"{'variant':<{wid}}  " + "  ".join(f"{n:>10}" for n in names)
    rows = [f"{r.dataset:<{wid}}  " + "  ".join(f"{r.values[n]:10.4f}" for n in names) for r in reports]
    return "\n".join([head, *rows])
