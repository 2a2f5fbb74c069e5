"""Feature-map export and response statistics for inspecting trained models."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import SyntheticSample, collate
from .model import ChangeModel
from .tensor import no_grad, ops


def feature_magnitude(level: np.ndarray) -> np.ndarray:
    """Mean absolute activation over channels of one (C, H, W) map."""
    return np.abs(np.asarray(level)).mean(axis=0)


def minmax(a: np.ndarray) -> np.ndarray:
    lo, hi = float(a.min()), float(a.max())
    if hi == lo:
        return np.zeros_like(a, dtype=np.float64)
    return (a - lo) / (hi - lo)


def pgm_bytes(img: np.ndarray) -> bytes:
    """8-bit binary greymap of an array with values in [0, 1]."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got {img.shape}")
    q = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    h, w = q.shape
    return f"P5\n{w} {h}\n255\n".encode() + q.tobytes()


def read_pgm(data: bytes) -> np.ndarray:
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def mask_to_grid(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    """Fraction of each cell of an (h, w) grid covered by a full-resolution mask."""
    mh, mw = mask.shape
    if mh % h or mw % w:
        raise ValueError(f"mask {mask.shape} does not tile onto {h}x{w}")
    blocks = mask.reshape(h, mh // h, w, mw // w).astype(np.float64)
    return blocks.mean(axis=(1, 3))


def pair_layout_mask(mask: np.ndarray, level_shape: tuple[int, int], layout: str) -> np.ndarray:
    """A per-image mask placed onto a feature grid of either concat layout (both halves for horizontal)."""
    h, w = level_shape
    if layout == "horizontal":
        half = mask_to_grid(mask, h, w // 2)
        return np.concatenate([half, half], axis=1)
    return mask_to_grid(mask, h, w)


def response_ratio(magnitude: np.ndarray, coverage: np.ndarray) -> float:
    """Coverage-weighted mean magnitude inside the mask over the weighted mean outside.

    ``coverage`` holds per-cell mask fractions in [0, 1]; nan when either side has no weight.
    """
    cov = np.asarray(coverage, dtype=np.float64)
    w_in, w_out = cov.sum(), (1.0 - cov).sum()
    if w_in == 0 or w_out == 0:
        return float("nan")
    inside = (magnitude * cov).sum() / w_in
    outside = (magnitude * (1.0 - cov)).sum() / w_out
    return float(inside / outside) if outside > 0 else float("inf")


def stage_features(model: ChangeModel, sample: SyntheticSample) -> list[np.ndarray]:
    """Post-prompt feature maps of every stage for one sample, each (C, H, W')."""
    batch = collate([sample], model.dtype)
    was = model.training
    model.eval()
    with no_grad():
        pyr = model.features(batch.pre, batch.post)
    model.train(was)
    return [lv.data[0].astype(np.float64) for lv in pyr.levels]


def export_stage(level: np.ndarray, out_dir, stage: int) -> tuple[Path, Path]:
    from .tensor.io import save_tensor
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pgm = out_dir / f"stage{stage}.pgm"
    pgm.write_bytes(pgm_bytes(minmax(feature_magnitude(level))))
    raw = out_dir / f"stage{stage}.utsr"
    save_tensor(raw, level)
    return pgm, raw


def change_probability(model: ChangeModel, samples, batch_size: int = 8) -> np.ndarray:
    """Softmax change probability (N, H, W) from the change head (eval mode)."""
    was = model.training
    model.eval()
    out = []
    with no_grad():
        for i in range(0, len(samples), batch_size):
            b = collate(samples[i:i + batch_size], model.dtype)
            o = model(b.pre, b.post)
            logits = o.change if o.change is not None else o.loc
            out.append(ops.softmax(logits, axis=1).data[:, 1])
    model.train(was)
    return np.concatenate(out)


def distractor_response(model: ChangeModel, samples, batch_size: int = 8) -> float:
    """Mean change probability over pixels touched only by pseudo-changes (distractor and unchanged)."""
    prob = change_probability(model, samples, batch_size)
    key = "change" if "change" in samples[0].labels else "loc"
    sel = np.stack([s.distractor & (s.labels[key] == 0) for s in samples])
    if not sel.any():
        return float("nan")
    return float(prob[sel].mean())
