"""Frequency change prompt generator.

The input map is split into a low and a high frequency band by radial masks
on its 2-D spectrum.  Each band yields a prompt (channel weight x frequency
mask x spatial attention); the prompt-weighted bands are fused by a 1x1 conv,
gated by a spatial modulator over channel-group means, and added back to the
input with a learnable coefficient ``alpha``.
"""
from __future__ import annotations

import numpy as np

from . import nn
from .config import ConfigError
from .nn import Module, Parameter
from .tensor import DimensionError, Tensor, as_tensor, ops

MODES = ("adaptive", "fixed", "single")
FIXED_THRESHOLDS = (0.1, 0.3)
SINGLE_THRESHOLD = 0.1


def radial_frequency_map(h: int, w: int) -> np.ndarray:
    """Radial frequency of every bin of an (h, w) FFT grid, scaled so the Nyquist corner is 1."""
    if h < 1 or w < 1:
        raise ValueError(f"grid must be at least 1x1, got {h}x{w}")
    fh = np.fft.fftfreq(h)[:, None]
    fw = np.fft.fftfreq(w)[None, :]
    return np.sqrt(fh ** 2 + fw ** 2) / (np.sqrt(2.0) * 0.5)


def _logit(p: float) -> float:
    return float(np.log(p / (1 - p)))


def thresholds_from_raw(raw: Tensor) -> tuple[Tensor, Tensor]:
    """Map two unconstrained scalars to ``0 < low <= high < 1``.

    ``low = sigmoid(r0)``, ``high = low + (1 - low) * sigmoid(r1)``.
    """
    low = ops.sigmoid(ops.getitem(raw, 0))
    high = ops.add(low, ops.mul(ops.sub(1.0, low), ops.sigmoid(ops.getitem(raw, 1))))
    return low, high


def raw_from_thresholds(low: float, high: float) -> np.ndarray:
    if not 0 < low < high < 1:
        raise ConfigError(f"thresholds must satisfy 0 < low < high < 1, got ({low}, {high})")
    return np.array([_logit(low), _logit((high - low) / (1 - low))])


def band_masks(freq, low, high, tau: float = 0.05, mode: str = "soft") -> tuple[Tensor, Tensor]:
    """Low/high band masks over a radial frequency map.

    ``soft``: ``sigmoid((low - F)/tau)`` and ``sigmoid((F - high)/tau)``,
    differentiable in the thresholds.  The DC bin is excluded from the high
    band in every mode, so constant maps carry no high-band energy.  ``hard``: indicators ``F <= low`` and
    ``F >= high``.  ``single``: ``F <= low`` and its complement.
    """
    freq = np.asarray(freq)
    if mode == "soft":
        if tau <= 0:
            raise ConfigError("tau must be positive")
        low, high = as_tensor(low), as_tensor(high)
        f = Tensor(freq.astype(low.dtype))
        m_low = ops.sigmoid(ops.div(ops.sub(low, f), tau))
        m_high = ops.mul(ops.sigmoid(ops.div(ops.sub(f, high), tau)), (freq > 0).astype(low.dtype))
        return m_low, m_high
    lo = float(getattr(low, "data", low))
    if mode == "hard":
        hi = float(getattr(high, "data", high))
        return Tensor((freq <= lo).astype(np.float64)), Tensor((freq >= hi).astype(np.float64))
    if mode == "single":
        return Tensor((freq <= lo).astype(np.float64)), Tensor((freq > lo).astype(np.float64))
    raise ConfigError(f"unknown mask mode {mode!r}")


class BandPrompt(Module):
    """Channel weights from pooled band magnitude, spatial weights from a 3x3 conv."""

    def __init__(self, channels: int, rng: np.random.Generator):
        hidden = max(channels // 4, 2)
        self.fc1 = nn.Linear(channels, hidden, rng)
        self.fc2 = nn.Linear(hidden, channels, rng)
        self.spatial = nn.Conv2d(channels, 1, 3, rng)

    def global_weight(self, band: Tensor) -> Tensor:
        # RMS over space: average pooling of the squared response
        pooled = ops.sqrt(ops.add(ops.mean(ops.mul(band, band), axis=(2, 3)), 1e-12))
        w = ops.sigmoid(self.fc2(ops.gelu(self.fc1(pooled))))
        return ops.reshape(w, w.shape + (1, 1))

    def spatial_weight(self, band: Tensor) -> Tensor:
        return ops.sigmoid(self.spatial(band))

    def forward(self, band: Tensor, mask: Tensor) -> Tensor:
        return band_prompt(self.global_weight(band), mask, self.spatial_weight(band))


def band_prompt(w_global: Tensor, mask: Tensor, w_spatial: Tensor) -> Tensor:
    """Elementwise triple product, broadcast to (N, C, H, W)."""
    m = ops.reshape(as_tensor(mask), (1, 1) + tuple(mask.shape))
    return ops.mul(ops.mul(w_global, m), w_spatial)


def group_means(p: Tensor, groups: int) -> Tensor:
    n, c, h, w = p.shape
    if c % groups:
        raise ConfigError(f"group count {groups} does not divide {c} channels")
    return ops.mean(ops.reshape(p, (n, groups, c // groups, h, w)), axis=2)


def spatial_modulator(p_fused: Tensor, p_grouped: Tensor, conv: nn.Conv2d) -> Tensor:
    """Gate each channel group of ``p_fused`` by ``sigmoid(conv3x3(group means))``."""
    n, c, h, w = p_fused.shape
    g = p_grouped.shape[1]
    if c % g:
        raise ConfigError(f"group count {g} does not divide {c} channels")
    gate = ops.reshape(ops.sigmoid(conv(p_grouped)), (n, g, 1, h, w))
    out = ops.mul(ops.reshape(p_fused, (n, g, c // g, h, w)), gate)
    return ops.reshape(out, (n, c, h, w))


class FCPG(Module):
    """Frequency prompt generator with a residual output ``x + alpha * prompt``.

    ``mode``: ``adaptive`` (learned soft thresholds), ``fixed`` (hard 0.1/0.3)
    or ``single`` (one hard threshold at 0.1).
    """

    def __init__(self, channels: int, rng: np.random.Generator, mode: str = "adaptive", spm: bool = True,
                 groups: int = 4, tau: float = 0.05, alpha: float = 0.1,
                 init_thresholds: tuple[float, float] = FIXED_THRESHOLDS):
        if mode not in MODES:
            raise ConfigError(f"unknown FCPG mode {mode!r}; expected one of {MODES}")
        groups = min(groups, channels)
        if channels % groups:
            raise ConfigError(f"group count {groups} does not divide {channels} channels")
        self.mode, self.use_spm, self.groups, self.tau = mode, spm, groups, tau
        self.theta_raw = Parameter(raw_from_thresholds(*init_thresholds))
        self.low = BandPrompt(channels, rng)
        self.high = BandPrompt(channels, rng)
        self.fusion = nn.Conv2d(2 * channels, channels, 1, rng)
        self.spm = nn.Conv2d(groups, groups, 3, rng)
        self.alpha = Parameter(np.array(alpha))

    def thresholds(self) -> tuple[Tensor, Tensor]:
        if self.mode == "fixed":
            return Tensor(FIXED_THRESHOLDS[0]), Tensor(FIXED_THRESHOLDS[1])
        if self.mode == "single":
            return Tensor(SINGLE_THRESHOLD), Tensor(SINGLE_THRESHOLD)
        return thresholds_from_raw(self.theta_raw)

    def masks(self, h: int, w: int) -> tuple[Tensor, Tensor]:
        low, high = self.thresholds()
        kind = {"adaptive": "soft", "fixed": "hard", "single": "single"}[self.mode]
        return band_masks(radial_frequency_map(h, w), low, high, self.tau, kind)

    def prompt(self, x: Tensor) -> Tensor:
        """The modulated prompt added to ``x`` (before scaling by alpha)."""
        m_low, m_high = self.masks(*x.shape[-2:])
        x_low = ops.spectral_filter(x, _cast(m_low, x))
        x_high = ops.spectral_filter(x, _cast(m_high, x))
        p_low = self.low(x_low, _cast(m_low, x))
        p_high = self.high(x_high, _cast(m_high, x))
        fused = self.fusion(ops.concat([ops.mul(p_low, x_low), ops.mul(p_high, x_high)], axis=1))
        if not self.use_spm:
            return fused
        return spatial_modulator(fused, group_means(fused, self.groups), self.spm)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim == 3:
            out = self.forward(ops.reshape(x, (1,) + x.shape))
            return ops.reshape(out, out.shape[1:])
        if x.ndim != 4:
            raise DimensionError(f"FCPG expects (N, C, H, W), got {x.shape}")
        return ops.add(x, ops.mul(self.alpha, self.prompt(x)))


def _cast(m: Tensor, like: Tensor) -> Tensor:
    if m.dtype == like.dtype or m.requires_grad:
        return m
    return Tensor(m.data.astype(like.dtype))


def fcpg_forward(x: Tensor, module: FCPG) -> Tensor:
    return module(x)
