import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unicd import nn
from unicd.config import ConfigError, ModelConfig
from unicd.encoder import Encoder, PatchEmbed, encode, patch_embed
from unicd.gradcheck import check_gradients, weighted_sum
from unicd.scan import BitemporalPair
from unicd.tensor import Tensor


def encoder(cfg, seed=0):
    return Encoder(cfg, np.random.default_rng(seed), nn.Noise(seed)).astype(np.float64).eval()


class TestPatchEmbed:
    def test_shape(self, rng):
        pe = PatchEmbed(3, 16, 4, rng)
        assert patch_embed(Tensor(rng.random((3, 32, 64))), pe).shape == (16, 8, 16)

    def test_zero_input_zero_bias(self, rng):
        pe = PatchEmbed(3, 8, 4, rng).astype(np.float64)
        pe.proj.bias.data[...] = 0
        assert not pe(Tensor(np.zeros((1, 3, 8, 8)))).data.any()

    @pytest.mark.parametrize("shape", [(1, 3, 10, 8), (1, 3, 8, 6)])
    def test_indivisible(self, rng, shape):
        with pytest.raises(ConfigError, match="divisible"):
            PatchEmbed(3, 8, 4, rng)(Tensor(np.zeros(shape)))

    def test_gradient_check(self, rng):
        pe = PatchEmbed(3, 4, 4, rng).astype(np.float64)
        x = Tensor(rng.standard_normal((1, 3, 8, 8)), requires_grad=True)
        res = check_gradients(lambda: weighted_sum(pe(x)), [x, *pe.parameters()])
        assert res.passed, res


class TestEncode:
    def test_pyramid_shapes(self, rng, tiny_cfg):
        enc = encoder(tiny_cfg)
        pair = BitemporalPair(rng.random((1, 3, 32, 32)), rng.random((1, 3, 32, 32)))
        d = tiny_cfg.stage_dims
        assert encode(pair, enc).shapes == [(1, d[0], 8, 16), (1, d[1], 4, 8), (1, d[2], 2, 4), (1, d[3], 1, 2)]

    def test_default_dims(self, rng):
        enc = Encoder(ModelConfig(), rng, nn.Noise(0)).eval()
        pyr = enc(Tensor(rng.random((1, 3, 32, 64)).astype(np.float32)))
        assert [t.shape[1] for t in pyr.levels] == [16, 32, 64, 128]

    def test_no_fcpg_same_shapes(self, rng, tiny_cfg):
        x = Tensor(rng.random((1, 3, 32, 64)))
        with_fcpg = encoder(tiny_cfg)(x)
        ablated = encoder(tiny_cfg.replace(fcpg=False))
        assert not ablated.fcpg
        assert ablated(x).shapes == with_fcpg.shapes

    def test_fcpg_alpha_zero_equals_ablation(self, rng, tiny_cfg):
        # with every alpha at zero the prompts drop out and the backbone runs alone
        x = Tensor(rng.random((1, 3, 32, 64)))
        enc = encoder(tiny_cfg)
        for f in enc.fcpg:
            f.alpha.data[...] = 0
        bare = encoder(tiny_cfg.replace(fcpg=False))
        for (_, a), (_, b) in zip(bare.named_parameters(), enc.backbone.named_parameters()):
            a.data[...] = b.data
        for a, b in zip(enc(x).levels, bare(x).levels):
            np.testing.assert_array_equal(a.data, b.data)

    @pytest.mark.parametrize("shape", [(1, 3, 16, 64), (1, 3, 32, 48)])
    def test_indivisible_by_32(self, tiny_cfg, shape):
        with pytest.raises(ConfigError):
            encoder(tiny_cfg)(Tensor(np.zeros(shape)))

    @given(st.integers(1, 2), st.integers(1, 2), st.integers(1, 2))
    @settings(max_examples=6, deadline=None)
    def test_shape_contract(self, n, hk, wk):
        cfg = ModelConfig.tiny()
        h, w = 32 * hk, 32 * wk
        pyr = encoder(cfg)(Tensor(np.random.default_rng(hk).random((n, 3, h, 2 * w))))
        for i, t in enumerate(pyr.levels):
            s = 4 * 2 ** i
            assert t.shape == (n, cfg.stage_dims[i], h // s, 2 * w // s)

    def test_end_to_end_gradient_check(self, rng, tiny_cfg):
        enc = encoder(tiny_cfg)
        x = Tensor(rng.standard_normal((1, 3, 32, 64)), requires_grad=True)

        def fn():
            levels = enc(x).levels
            total = weighted_sum(levels[0], 1)
            for i, t in enumerate(levels[1:], start=2):
                total = total + weighted_sum(t, i)
            return total
        res = check_gradients(fn, [x, *enc.parameters()], max_elems=2)
        assert res.passed, res
