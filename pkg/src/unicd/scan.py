"""Bitemporal concatenation and four-directional scanning between 2-D maps and sequences.

Maps are ``(C, H, W)`` or batched ``(N, C, H, W)``; sequences are ``(L, C)`` or
``(N, L, C)`` with ``L = H * W`` of the (already concatenated) map.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import DimensionError, GraphError, Tensor, as_tensor, ops

DIRECTIONS = ("row", "row_rev", "col", "col_rev")


@dataclass
class BitemporalPair:
    pre: Tensor
    post: Tensor

    def __post_init__(self):
        self.pre, self.post = as_tensor(self.pre), as_tensor(self.post)
        if self.pre.shape != self.post.shape:
            raise DimensionError(f"pre {self.pre.shape} and post {self.post.shape} are not registered")


@dataclass
class ScanSequence:
    direction: str
    seq: Tensor
    origin_shape: tuple[int, int]

    @property
    def length(self) -> int:
        return self.seq.shape[-2]


def horizontal_concat(pair: BitemporalPair) -> Tensor:
    """Place ``post`` to the right of ``pre``: (..., C, H, W) -> (..., C, H, 2W)."""
    return ops.concat([pair.pre, pair.post], axis=-1)


def channel_concat(pair: BitemporalPair) -> Tensor:
    """Stack along channels: (..., C, H, W) -> (..., 2C, H, W).  Ablation layout."""
    return ops.concat([pair.pre, pair.post], axis=-3)


def _check_direction(direction: str) -> None:
    if direction not in DIRECTIONS:
        raise ValueError(f"unknown scan direction {direction!r}; expected one of {DIRECTIONS}")


def scan(x: Tensor, direction: str) -> ScanSequence:
    """Flatten a map into a sequence in raster (``row``) or column-major (``col``) order."""
    _check_direction(direction)
    x = as_tensor(x)
    batched = x.ndim == 4
    c, h, w = x.shape[-3:]
    lead = x.shape[:1] if batched else ()
    if direction.startswith("row"):
        perm = (0, 2, 3, 1) if batched else (1, 2, 0)
    else:
        perm = (0, 3, 2, 1) if batched else (2, 1, 0)
    seq = ops.reshape(ops.transpose(x, perm), lead + (h * w, c))
    if direction.endswith("_rev"):
        seq = ops.flip(seq, -2)
    return ScanSequence(direction, seq, (h, w))


def inverse_scan(s: ScanSequence) -> Tensor:
    """Undo :func:`scan`, restoring the ``(…, C, H, W)`` layout."""
    _check_direction(s.direction)
    h, w = s.origin_shape
    seq = s.seq
    if seq.shape[-2] != h * w:
        raise GraphError(f"sequence length {seq.shape[-2]} does not match origin {h}x{w}")
    batched = seq.ndim == 3
    lead = seq.shape[:1] if batched else ()
    c = seq.shape[-1]
    if s.direction.endswith("_rev"):
        seq = ops.flip(seq, -2)
    if s.direction.startswith("row"):
        grid = ops.reshape(seq, lead + (h, w, c))
        perm = (0, 3, 1, 2) if batched else (2, 0, 1)
    else:
        grid = ops.reshape(seq, lead + (w, h, c))
        perm = (0, 3, 2, 1) if batched else (2, 1, 0)
    return ops.transpose(grid, perm)


def aggregate_directions(*maps: Tensor) -> Tensor:
    """Elementwise sum of the per-direction maps, accumulated left to right."""
    if not maps:
        raise ValueError("need at least one map")
    shape = maps[0].shape
    for m in maps[1:]:
        if m.shape != shape:
            raise DimensionError(f"direction maps differ in shape: {shape} vs {m.shape}")
    out = as_tensor(maps[0])
    for m in maps[1:]:
        out = ops.add(out, m)
    return out


def scan_permutation(h: int, w: int, direction: str) -> np.ndarray:
    """Flat spatial index visited at each sequence position."""
    _check_direction(direction)
    grid = np.arange(h * w).reshape(h, w)
    order = grid.reshape(-1) if direction.startswith("row") else grid.T.reshape(-1)
    return order[::-1].copy() if direction.endswith("_rev") else order
