"""Segmentation losses and the per-task weighted compositions.

All losses take logits shaped (N, K, H, W) (or unbatched (K, H, W)) and
integer label maps shaped (N, H, W) (or (H, W)).  Pixels labelled
``ignore_index`` contribute nothing.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import TaskKind
from .decoder import HeadOutputs
from .tensor import Tensor, ops
from .tensor.core import make_result

IGNORE_INDEX = 255

BCD_WEIGHTS = {"ce": 1.0, "lovasz": 0.75}
BDA_WEIGHTS = {"cc_loc": 1.0, "cc_clf": 1.0, "lovasz_loc": 0.5, "lovasz_clf": 1.0}
SCD_WEIGHTS = {
    "ce_cd": 1.0,
    "ce_t1": 0.5,
    "ce_t2": 0.5,
    "sim": 0.5 * 0.5,
    "lovasz_cd": 0.75,
    "lovasz_t1": 0.75 * 0.5,
    "lovasz_t2": 0.75 * 0.5,
}
TASK_WEIGHTS = {TaskKind.BCD: BCD_WEIGHTS, TaskKind.SCD: SCD_WEIGHTS, TaskKind.BDA: BDA_WEIGHTS}


class LabelError(ValueError):
    """A label map holds a value outside the valid class range."""


class ContractError(ValueError):
    """Outputs of the wrong task were passed to a task loss."""


def _batched(logits: Tensor, labels) -> tuple[Tensor, np.ndarray]:
    labels = np.asarray(labels)
    if logits.ndim == 3:
        logits = ops.reshape(logits, (1,) + logits.shape)
        labels = labels[None]
    if labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ContractError(f"labels {labels.shape} do not match logits {logits.shape}")
    return logits, labels.astype(np.int64)


def _check_labels(labels: np.ndarray, k: int, ignore_index: int) -> np.ndarray:
    valid = labels != ignore_index
    bad = valid & ((labels < 0) | (labels >= k))
    if bad.any():
        pos = tuple(int(i) for i in np.argwhere(bad)[0])
        raise LabelError(f"label {int(labels[pos])} at pixel {pos} is outside [0, {k})")
    return valid


def cross_entropy(logits: Tensor, labels, class_weights=None, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Weighted negative log-softmax summed over valid pixels, divided by the valid-pixel count.

    Returns 0 when every pixel is ignored.
    """
    logits, labels = _batched(logits, labels)
    k = logits.shape[1]
    valid = _check_labels(labels, k, ignore_index)
    count = int(valid.sum())
    x = logits.data
    dt = x.dtype
    w = np.ones(k, dtype=dt) if class_weights is None else np.asarray(class_weights, dtype=dt)
    if w.shape != (k,):
        raise ContractError(f"expected {k} class weights, got {w.shape}")
    safe = np.where(valid, labels, 0)
    shifted = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    pix_w = np.where(valid, w[safe], 0).astype(dt)
    value = -(pix_w * picked).sum() / max(count, 1)

    def backward(g):
        if count == 0:
            return (np.zeros_like(x),)
        grad = np.exp(logp)
        onehot = np.zeros_like(grad)
        np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
        grad -= onehot
        grad *= (pix_w / count)[:, None]
        return (grad * g,)

    return make_result(np.asarray(value, dtype=dt), (logits,), backward, "cross_entropy")


def class_balanced_weights(label_maps, num_classes: int, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """Inverse class frequency over all maps, scaled to mean 1 over the present classes.

    Classes that never occur get weight 1 (they are never a target, so the
    value is inert).
    """
    counts = np.zeros(num_classes, dtype=np.int64)
    for m in label_maps:
        m = np.asarray(m)
        m = m[m != ignore_index]
        counts += np.bincount(m.ravel().astype(np.int64), minlength=num_classes)[:num_classes]
    w = np.ones(num_classes)
    present = counts > 0
    if present.any():
        inv = counts[present].sum() / counts[present]
        w[present] = inv / inv.mean()
    return w


def lovasz_grad(gt_sorted) -> np.ndarray:
    """Gradient of the Lovász extension of the Jaccard loss w.r.t. sorted errors.

    ``gt_sorted`` is the foreground indicator ordered by decreasing error.
    Entry k is the increase in Jaccard loss when the k-th pixel joins the
    error set.  Without foreground the first error alone carries weight 1,
    so any false positive costs the full loss.
    """
    gt = np.asarray(gt_sorted, dtype=np.float64)
    if gt.size == 0:
        return gt.copy()
    total = gt.sum()
    inter = total - np.cumsum(gt)
    union = total + np.cumsum(1.0 - gt)
    jac = 1.0 - inter / union
    jac[1:] = jac[1:] - jac[:-1]
    return jac


def _descending(err: np.ndarray) -> np.ndarray:
    # stable sort keeps pixel-index order among ties
    return np.argsort(-err, kind="stable")


def lovasz_extension(errors, gt) -> float:
    """Lovász extension of the Jaccard loss evaluated at an error vector (numpy, no graph)."""
    errors = np.asarray(errors, dtype=np.float64).ravel()
    gt = np.asarray(gt).ravel().astype(bool)
    order = _descending(errors)
    return float(errors[order] @ lovasz_grad(gt[order]))


def _lovasz_weighted(err: Tensor, fg: np.ndarray) -> Tensor:
    order = _descending(err.data)
    g = np.empty(fg.size, dtype=err.dtype)
    g[order] = lovasz_grad(fg[order])
    return ops.sum(ops.mul(err, g))


def lovasz_softmax(probs: Tensor, labels, ignore_index: int = IGNORE_INDEX, classes: str = "present") -> Tensor:
    """Per-class Lovász extension on |fg - p_c|, averaged over classes present in ``labels``.

    ``probs`` holds class probabilities (softmax already applied).
    """
    probs, labels = _batched(probs, labels)
    k = probs.shape[1]
    valid = _check_labels(labels, k, ignore_index).ravel()
    flat = ops.reshape(ops.transpose(probs, (0, 2, 3, 1)), (-1, k))
    lab = labels.ravel()
    if not valid.all():
        idx = np.flatnonzero(valid)
        flat = ops.getitem(flat, idx)
        lab = lab[idx]
    if lab.size == 0:
        return ops.mul(ops.sum(flat), 0.0)
    losses = []
    for c in range(k):
        fg = lab == c
        if classes == "present" and not fg.any():
            continue
        err = ops.abs(ops.sub(fg.astype(probs.dtype), ops.getitem(flat, (slice(None), c))))
        losses.append(_lovasz_weighted(err, fg))
    if not losses:
        return ops.mul(ops.sum(flat), 0.0)
    total = losses[0]
    for t in losses[1:]:
        total = ops.add(total, t)
    return ops.div(total, float(len(losses)))


def lovasz_hinge(logits: Tensor, labels, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Binary Lovász hinge on signed margins ``1 - logit * (2y - 1)``."""
    labels = np.asarray(labels)
    if labels.shape != logits.shape:
        raise ContractError(f"labels {labels.shape} do not match logits {logits.shape}")
    valid = _check_labels(labels, 2, ignore_index).ravel()
    flat = ops.reshape(logits, (-1,))
    lab = labels.ravel()
    if not valid.all():
        idx = np.flatnonzero(valid)
        flat = ops.getitem(flat, idx)
        lab = lab[idx]
    if lab.size == 0:
        return ops.mul(ops.sum(flat), 0.0)
    signs = (2.0 * lab - 1.0).astype(logits.dtype)
    err = ops.sub(1.0, ops.mul(flat, signs))
    return _lovasz_weighted(ops.relu(err), lab == 1)


def temporal_similarity(sem_t1: Tensor, sem_t2: Tensor, change_labels) -> Tensor:
    """Mean ``1 - cos(p_t1, p_t2)`` of the class-probability vectors over unchanged pixels (0 if none)."""
    unchanged = (np.asarray(change_labels) == 0)
    if sem_t1.ndim == 3:
        sem_t1, sem_t2 = ops.reshape(sem_t1, (1,) + sem_t1.shape), ops.reshape(sem_t2, (1,) + sem_t2.shape)
        unchanged = unchanged[None]
    p1, p2 = ops.softmax(sem_t1, axis=1), ops.softmax(sem_t2, axis=1)
    count = int(unchanged.sum())
    dot = ops.sum(ops.mul(p1, p2), axis=1)
    n1 = ops.sqrt(ops.sum(ops.mul(p1, p1), axis=1))
    n2 = ops.sqrt(ops.sum(ops.mul(p2, p2), axis=1))
    cos = ops.div(dot, ops.mul(n1, n2))
    gap = ops.mul(ops.sub(1.0, cos), unchanged.astype(cos.dtype))
    return ops.div(ops.sum(gap), float(max(count, 1)))


@dataclass
class LossReport:
    """``total`` keeps the graph for backward; ``components`` are the unweighted values."""

    task: str
    total: Tensor
    components: dict[str, float] = field(default_factory=dict)
    weights: dict[str, float] = field(default_factory=dict)

    def recombine(self) -> float:
        return combine(self.weights, self.components)

    def trace_fields(self) -> list[str]:
        return list(self.components) + ["total"]


def combine(weights: dict, components: dict):
    """Weighted sum in the fixed order of ``weights``; works on floats or tensors."""
    total = None
    for name, w in weights.items():
        term = components[name] * w if not isinstance(components[name], Tensor) else ops.mul(components[name], w)
        total = term if total is None else total + term
    return total


def _report(task: TaskKind, parts: dict[str, Tensor]) -> LossReport:
    weights = TASK_WEIGHTS[task]
    total = combine(weights, parts)
    return LossReport(task.value, total, {k: float(v.data) for k, v in parts.items()}, dict(weights))


def _require(outputs: HeadOutputs, names, task: str) -> None:
    missing = [n for n in names if getattr(outputs, n) is None]
    if missing:
        raise ContractError(f"{task} loss needs head outputs {missing}")


def bcd_loss(outputs: HeadOutputs, labels, ignore_index: int = IGNORE_INDEX) -> LossReport:
    """Unbalanced CE plus 0.75 x Lovász-softmax on the change logits."""
    _require(outputs, ["change"], "bcd")
    logits = outputs.change
    parts = {
        "ce": cross_entropy(logits, labels, None, ignore_index),
        "lovasz": lovasz_softmax(ops.softmax(logits, axis=1), labels, ignore_index),
    }
    return _report(TaskKind.BCD, parts)


def bda_loss(outputs: HeadOutputs, loc_labels, dmg_labels, loc_weights=None, dmg_weights=None,
             ignore_index: int = IGNORE_INDEX) -> LossReport:
    """Class-balanced CE and Lovász on localization and on damage (building pixels only).

    Without explicit weights the balancing is computed from the given labels.
    """
    _require(outputs, ["loc", "dmg"], "bda")
    if loc_weights is None:
        loc_weights = class_balanced_weights([loc_labels], outputs.loc.shape[1], ignore_index)
    if dmg_weights is None:
        dmg_weights = class_balanced_weights([dmg_labels], outputs.dmg.shape[1], ignore_index)
    parts = {
        "cc_loc": cross_entropy(outputs.loc, loc_labels, loc_weights, ignore_index),
        "cc_clf": cross_entropy(outputs.dmg, dmg_labels, dmg_weights, ignore_index),
        "lovasz_loc": lovasz_softmax(ops.softmax(outputs.loc, axis=1), loc_labels, ignore_index),
        "lovasz_clf": lovasz_softmax(ops.softmax(outputs.dmg, axis=1), dmg_labels, ignore_index),
    }
    return _report(TaskKind.BDA, parts)


def scd_loss(outputs: HeadOutputs, change_labels, t1_labels, t2_labels, cd_weights=None, sem_weights=None,
             ignore_index: int = IGNORE_INDEX) -> LossReport:
    """Change CE, per-date semantic CE, the temporal similarity term and three Lovász terms."""
    _require(outputs, ["change", "sem_t1", "sem_t2"], "scd")
    k = outputs.sem_t1.shape[1]
    if cd_weights is None:
        cd_weights = class_balanced_weights([change_labels], 2, ignore_index)
    if sem_weights is None:
        sem_weights = class_balanced_weights([t1_labels, t2_labels], k, ignore_index)
    parts = {
        "ce_cd": cross_entropy(outputs.change, change_labels, cd_weights, ignore_index),
        "ce_t1": cross_entropy(outputs.sem_t1, t1_labels, sem_weights, ignore_index),
        "ce_t2": cross_entropy(outputs.sem_t2, t2_labels, sem_weights, ignore_index),
        "sim": temporal_similarity(outputs.sem_t1, outputs.sem_t2, change_labels),
        "lovasz_cd": lovasz_softmax(ops.softmax(outputs.change, axis=1), change_labels, ignore_index),
        "lovasz_t1": lovasz_softmax(ops.softmax(outputs.sem_t1, axis=1), t1_labels, ignore_index),
        "lovasz_t2": lovasz_softmax(ops.softmax(outputs.sem_t2, axis=1), t2_labels, ignore_index),
    }
    return _report(TaskKind.SCD, parts)


def trace_header(task) -> str:
    kind = TaskKind(task)
    return "\t".join(["step", "task", *TASK_WEIGHTS[kind], "total"])


def trace_line(step: int, report: LossReport) -> str:
    vals = [repr(report.components[k]) for k in report.weights]
    return "\t".join([str(step), report.task, *vals, repr(float(report.total.data))])


def parse_trace(text: str) -> list[dict]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    header = lines[0].split("\t")
    rows = []
    for ln in lines[1:]:
        cells = ln.split("\t")
        row = dict(zip(header, cells))
        rows.append({k: (v if k == "task" else (int(v) if k == "step" else float(v))) for k, v in row.items()})
    return rows
