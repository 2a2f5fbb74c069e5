"""The full change-detection network: encoder, decoder and prediction head."""
from __future__ import annotations

import numpy as np

from . import nn
from .config import ModelConfig
from .decoder import Decoder, HeadOutputs, PredictionHead
from .encoder import Encoder, FeaturePyramid
from .nn import Module
from .scan import BitemporalPair
from .tensor import Tensor

PARTS = ("backbone", "fcpg", "decoder", "head")


class ChangeModel(Module):
    def __init__(self, cfg: ModelConfig, dtype=np.float32):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.noise = nn.Noise(cfg.seed)
        self.encoder = Encoder(cfg, rng, self.noise)
        self.decoder = Decoder(cfg.stage_dims, cfg.dec_channels, rng, out_upsample=cfg.patch_size)
        self.head = PredictionHead(cfg, rng, self.noise)
        self.astype(dtype)

    @property
    def dtype(self):
        return self.parameters()[0].dtype

    def _pair(self, pre, post) -> BitemporalPair:
        dt = self.dtype
        pre = pre if isinstance(pre, Tensor) else Tensor(np.asarray(pre, dtype=dt))
        post = post if isinstance(post, Tensor) else Tensor(np.asarray(post, dtype=dt))
        return BitemporalPair(pre, post)

    def features(self, pre, post) -> FeaturePyramid:
        pair = self._pair(pre, post)
        return self.encoder(self.encoder.concat(pair))

    def forward(self, pre, post) -> HeadOutputs:
        pyramid = self.features(pre, post)
        return self.head(self.decoder(pyramid.levels))

    def set_step(self, step: int) -> None:
        self.noise.step = step

    def part_of(self, name: str) -> str:
        if name.startswith("encoder.backbone."):
            return "backbone"
        if name.startswith("encoder.fcpg."):
            return "fcpg"
        top = name.split(".", 1)[0]
        if top in ("decoder", "head"):
            return top
        raise KeyError(f"parameter {name} belongs to no partition")

    def partition(self) -> dict[str, list[str]]:
        groups: dict[str, list[str]] = {k: [] for k in PARTS}
        for name, _ in self.named_parameters():
            groups[self.part_of(name)].append(name)
        return groups
