"""AdamW with decoupled weight decay, and a step learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: AdamState, lr: float, wd: float = 0.0,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One in-place update of every array in ``params`` that has a gradient.

    ``p <- p * (1 - lr*wd) - lr * m_hat / (sqrt(v_hat) + eps)``.  Parameters keep
    their dtype; the moments are stored in the same dtype.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        if wd:
            p *= 1.0 - lr * wd
        p -= lr * update
    return state


def steplr(lr0: float, step: int, period: int, gamma: float) -> float:
    if period <= 0:
        raise ValueError("StepLR period must be positive")
    return lr0 * gamma ** math.floor(step / period)


class AdamW:
    """Stateful wrapper over :func:`adamw_step` for a fixed set of named parameters."""

    def __init__(self, named_params, lr: float, weight_decay: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = dict(named_params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def step(self, lr: float | None = None) -> None:
        arrays = {k: p.data for k, p in self.params.items()}
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        adamw_step(arrays, grads, self.state, self.lr if lr is None else lr, self.weight_decay,
                   self.betas[0], self.betas[1], self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
