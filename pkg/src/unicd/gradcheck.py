"""Central finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckResult:
    name: str
    max_rel_err: float
    checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_err)) and self.max_rel_err <= self.tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Max abs deviation scaled by the larger gradient magnitude of the pair (at least ``floor``)."""
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
                    tol: float = 1e-4, max_elems: int | None = None, seed: int = 0,
                    name: str = "", floor: float = 1e-8) -> GradCheckResult:
    """Compare ``backward()`` against central differences of ``fn`` for every input.

    ``fn`` must rebuild the graph from the current ``inputs[i].data``.  With
    ``max_elems`` only a random subset of each input's entries is perturbed.
    ``floor`` is the smallest gradient scale errors are measured against.
    """
    rng = np.random.default_rng(seed)
    for t in inputs:
        t.grad = None
    fn().backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    worst, checked = 0.0, 0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elems is not None and flat.size > max_elems:
            idx = np.sort(rng.choice(flat.size, size=max_elems, replace=False))
        num = np.empty(idx.size)
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn().item()
            flat[i] = orig - h
            fm = fn().item()
            flat[i] = orig
            num[n] = (fp - fm) / (2 * h)
        # a subsample can land only on near-zero entries; keep the whole tensor's scale
        scale = max(floor, float(np.max(np.abs(a), initial=0.0)))
        worst = max(worst, relative_error(a.reshape(-1)[idx], num, scale))
        checked += idx.size
    return GradCheckResult(name, worst, checked, tol)


def weighted_sum(out: Tensor, seed: int = 1) -> Tensor:
    """Scalar probe ``sum(out * r)`` with fixed random weights, for checking non-scalar ops."""
    r = np.random.default_rng(seed).standard_normal(out.shape).astype(out.dtype)
    return (out * Tensor(r)).sum()
