"""Top-down pyramid decoder, unified prediction head and task-specific outputs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .config import ModelConfig, TaskKind
from .nn import Module
from .tensor import GraphError, Tensor, ops


class Decoder(Module):
    """1x1 lateral projections, top-down 3x3 fusion, and a final multi-scale 3x3 fusion."""

    def __init__(self, dims, channels: int, rng: np.random.Generator, out_upsample: int = 4):
        self.out_upsample = out_upsample
        self.laterals = [nn.Conv2d(d, channels, 1, rng) for d in dims]
        self.smooth = [nn.Conv2d(channels, channels, 3, rng) for _ in dims[:-1]]
        self.fuse = nn.Conv2d(channels * len(dims), channels, 3, rng)

    def lateral_project(self, levels) -> list[Tensor]:
        return [conv(f) for conv, f in zip(self.laterals, levels)]

    def topdown_fuse(self, p: list[Tensor]) -> list[Tensor]:
        """``N_top = P_top``; ``N_i = conv3x3(up2(N_{i+1}) + P_i)`` going down."""
        for a, b in zip(p, p[1:]):
            if a.shape[-2] != 2 * b.shape[-2] or a.shape[-1] != 2 * b.shape[-1]:
                raise GraphError(f"pyramid levels {a.shape} and {b.shape} are not dyadic")
        out = [None] * len(p)
        out[-1] = p[-1]
        for i in range(len(p) - 2, -1, -1):
            out[i] = self.smooth[i](ops.add(ops.bilinear_upsample(out[i + 1], 2), p[i]))
        return out

    def fuse_final(self, n: list[Tensor]) -> Tensor:
        """Upsample every level to the finest one, concat, 3x3 conv, then restore input resolution."""
        ups = [ops.bilinear_upsample(t, 2 ** i) for i, t in enumerate(n)]
        c = self.fuse(ops.concat(ups[::-1], axis=1))
        return ops.bilinear_upsample(c, self.out_upsample)

    def forward(self, levels) -> Tensor:
        return self.fuse_final(self.topdown_fuse(self.lateral_project(levels)))


class UnifiedHead(Module):
    """Two conv-BN-activation layers; dropout after the first.  Channels C_in -> C_hid -> C_hid/2."""

    def __init__(self, cin: int, hidden: int, rng: np.random.Generator, noise: nn.Noise,
                 p: float = 0.2, act: str = "relu"):
        self.act = act
        # no conv bias: the following batch norm removes any per-channel offset
        self.conv1 = nn.Conv2d(cin, hidden, 3, rng, bias=False)
        self.bn1 = nn.BatchNorm2d(hidden)
        self.drop = nn.Dropout(p, noise)
        self.conv2 = nn.Conv2d(hidden, hidden // 2, 3, rng, bias=False)
        self.bn2 = nn.BatchNorm2d(hidden // 2)

    def forward(self, x: Tensor) -> Tensor:
        z1 = self.drop(ops.activation(self.bn1(self.conv1(x)), self.act))
        return ops.activation(self.bn2(self.conv2(z1)), self.act)


@dataclass
class HeadOutputs:
    change: Tensor | None = None
    sem_t1: Tensor | None = None
    sem_t2: Tensor | None = None
    loc: Tensor | None = None
    dmg: Tensor | None = None

    def items(self):
        return [(k, v) for k, v in vars(self).items() if v is not None]


def split_halves(z: Tensor, layout: str) -> tuple[Tensor, Tensor]:
    """Per-temporal views of the head features (both views are the full map for channel layout)."""
    if layout == "channel":
        return z, z
    w2 = z.shape[-1]
    if w2 % 2:
        raise GraphError(f"concatenated width {w2} is odd")
    w = w2 // 2
    return ops.getitem(z, (Ellipsis, slice(0, w))), ops.getitem(z, (Ellipsis, slice(w, w2)))


def suppress_background(sem: Tensor, change_prob, floor: float = 0.0) -> Tensor:
    """Scale foreground logits (channels 1..) by a constant change-probability map ``p``.

    ``fg * p + (1 - p) * floor``: where ``p`` is 0 the foreground logits sit
    at ``floor``.  ``p`` is treated as a constant (no gradient reaches the
    change branch through the gate).
    """
    p = np.asarray(getattr(change_prob, "data", change_prob), dtype=sem.dtype)
    fg = ops.mul(ops.getitem(sem, (slice(None), slice(1, None))), p)
    if floor:
        fg = ops.add(fg, (1.0 - p) * floor)
    return ops.concat([ops.getitem(sem, (slice(None), slice(0, 1))), fg], axis=1)


class TaskOutputs(Module):
    """1x1 output convolutions for the configured task."""

    def __init__(self, cfg: ModelConfig, cin: int, rng: np.random.Generator):
        self.kind = cfg.kind
        self.layout = cfg.concat
        self.floor = cfg.suppression_floor
        self.fixed_gate: np.ndarray | None = None  # pins the suppression gate (finite-difference checks)
        if self.kind in (TaskKind.BCD, TaskKind.SCD):
            self.mix_pre = nn.Conv2d(cin, cin, 1, rng)
            self.mix_post = nn.Conv2d(cin, cin, 1, rng)
            self.change = nn.Conv2d(cin, 2, 1, rng)
        if self.kind is TaskKind.SCD:
            self.sem_t1 = nn.Conv2d(cin, cfg.num_classes + 1, 1, rng)
            self.sem_t2 = nn.Conv2d(cin, cfg.num_classes + 1, 1, rng)
        if self.kind is TaskKind.BDA:
            self.loc = nn.Conv2d(cin, 2, 1, rng)
            self.dmg = nn.Conv2d(cin, cfg.damage_levels + 1, 1, rng)

    def change_logits(self, z_pre: Tensor, z_post: Tensor) -> Tensor:
        mixed = ops.mul(ops.add(self.mix_pre(z_pre), self.mix_post(z_post)), 0.5)
        return self.change(ops.relu(mixed))

    def forward(self, z: Tensor) -> HeadOutputs:
        z_pre, z_post = split_halves(z, self.layout)
        if self.kind is TaskKind.BDA:
            return HeadOutputs(loc=self.loc(z_pre), dmg=self.dmg(z_post))
        change = self.change_logits(z_pre, z_post)
        if self.kind is TaskKind.BCD:
            return HeadOutputs(change=change)
        prob = self.fixed_gate
        if prob is None:
            prob = ops.softmax(Tensor(change.data), axis=1).data[:, 1:2]
        return HeadOutputs(change=change,
                           sem_t1=suppress_background(self.sem_t1(z_pre), prob, self.floor),
                           sem_t2=suppress_background(self.sem_t2(z_post), prob, self.floor))


class PredictionHead(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, noise: nn.Noise):
        self.unified = UnifiedHead(cfg.dec_channels, cfg.hid_channels, rng, noise, cfg.dropout, cfg.head_activation)
        self.outputs = TaskOutputs(cfg, cfg.hid_channels // 2, rng)

    def forward(self, c: Tensor) -> HeadOutputs:
        return self.outputs(self.unified(c))
