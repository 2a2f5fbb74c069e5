"""Four-stage encoder: patch embedding, VSS blocks, per-stage FCPG, downsampling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .config import ConfigError, ModelConfig
from .fcpg import FCPG
from .nn import Module
from .scan import BitemporalPair, channel_concat, horizontal_concat
from .ssm import VSSBlock
from .tensor import Tensor, ops


@dataclass
class FeaturePyramid:
    """Encoder outputs at strides 4, 8, 16, 32 of the concatenated input."""
    levels: list[Tensor]

    def __getitem__(self, i: int) -> Tensor:
        return self.levels[i]

    def __len__(self) -> int:
        return len(self.levels)

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [t.shape for t in self.levels]


class PatchEmbed(Module):
    """Non-overlapping ``p x p`` convolution followed by channel norm."""

    def __init__(self, cin: int, dim: int, patch: int, rng: np.random.Generator):
        self.patch = patch
        self.proj = nn.Conv2d(cin, dim, patch, rng, stride=patch, pad=0)
        self.norm = nn.ChannelNorm(dim)

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[-2:]
        if h % self.patch or w % self.patch:
            raise ConfigError(f"input {h}x{w} is not divisible by the patch size {self.patch}")
        if x.ndim == 3:
            return ops.getitem(self.norm(self.proj(ops.reshape(x, (1,) + x.shape))), 0)
        return self.norm(self.proj(x))


class Downsample(Module):
    """Stride-2 2x2 convolution + channel norm."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        self.proj = nn.Conv2d(cin, cout, 2, rng, stride=2, pad=0)
        self.norm = nn.ChannelNorm(cout)

    def forward(self, x: Tensor) -> Tensor:
        return self.norm(self.proj(x))


class Stage(Module):
    def __init__(self, blocks: list[VSSBlock]):
        self.blocks = blocks

    def forward(self, x: Tensor) -> Tensor:
        for b in self.blocks:
            x = b(x)
        return x


class Backbone(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, noise: nn.Noise):
        cin = cfg.in_channels * (2 if cfg.concat == "channel" else 1)
        dims = cfg.stage_dims
        self.patch_embed = PatchEmbed(cin, dims[0], cfg.patch_size, rng)
        rates = np.linspace(0.0, cfg.drop_path, sum(cfg.stage_depths))
        stages, k = [], 0
        for dim, depth in zip(dims, cfg.stage_depths):
            blocks = []
            for _ in range(depth):
                blocks.append(VSSBlock(dim, cfg.state_dim, rng, noise, float(rates[k]), cfg.mlp_ratio))
                k += 1
            stages.append(Stage(blocks))
        self.stages = stages
        self.downsamples = [Downsample(a, b, rng) for a, b in zip(dims, dims[1:])]


class Encoder(Module):
    """Backbone with an FCPG after each stage's blocks (before downsampling)."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, noise: nn.Noise):
        self.cfg = cfg
        self.backbone = Backbone(cfg, rng, noise)
        self.fcpg = [FCPG(d, rng, mode=cfg.fcpg_mode, spm=cfg.spm, groups=cfg.fcpg_groups,
                          tau=cfg.fcpg_tau, alpha=cfg.fcpg_alpha) for d in cfg.stage_dims] if cfg.fcpg else []

    def concat(self, pair: BitemporalPair) -> Tensor:
        return horizontal_concat(pair) if self.cfg.concat == "horizontal" else channel_concat(pair)

    def forward(self, x: Tensor) -> FeaturePyramid:
        """Encode an already-concatenated input map (N, C, H, W')."""
        h, w = x.shape[-2:]
        if h % 32 or w % 32:
            raise ConfigError(f"concatenated input {h}x{w} must be divisible by 32")
        bb = self.backbone
        x = bb.patch_embed(x)
        levels = []
        for i, stage in enumerate(bb.stages):
            x = stage(x)
            if self.cfg.fcpg:
                x = self.fcpg[i](x)
            levels.append(x)
            if i < len(bb.downsamples):
                x = bb.downsamples[i](x)
        return FeaturePyramid(levels)


def patch_embed(x: Tensor, module: PatchEmbed) -> Tensor:
    return module(x)


def encode(pair: BitemporalPair, encoder: Encoder) -> FeaturePyramid:
    return encoder(encoder.concat(pair))
