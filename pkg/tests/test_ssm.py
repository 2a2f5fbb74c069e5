import math

import numpy as np
import pytest

import oracles
from unicd import nn
from unicd.scan import scan
from unicd.gradcheck import check_gradients, weighted_sum
from unicd.ssm import SSMParams, VSSBlock, discretize, generate_params, selective_scan, selective_scan_op
from unicd.tensor import Tensor, ops


def params(d=3, n=4, seed=0):
    p = SSMParams(d, n, np.random.default_rng(seed))
    return p.astype(np.float64)


def zero_branch_outputs(blk: VSSBlock) -> None:
    for conv in (blk.out_proj, blk.fc2):
        conv.weight.data[...] = 0
        conv.bias.data[...] = 0


class TestParams:
    def test_zero_input_gives_ln2(self):
        p = params()
        p.b_delta.data[...] = 0
        delta, B, C = generate_params(Tensor(np.zeros((5, 3))), p)
        np.testing.assert_allclose(delta.data, math.log(2), atol=1e-15)
        assert not B.data.any() and not C.data.any()

    def test_matmul_oracle(self, rng):
        p = params()
        x = rng.standard_normal((6, 3))
        delta, B, C = generate_params(Tensor(x), p)
        np.testing.assert_allclose(delta.data, oracles.softplus(x @ p.w_delta.data.T + p.b_delta.data), atol=1e-12)
        np.testing.assert_allclose(B.data, x @ p.w_b.data.T, atol=1e-12)
        np.testing.assert_allclose(C.data, x @ p.w_c.data.T, atol=1e-12)
        assert (delta.data > 0).all()

    def test_init_conventions(self):
        p = params(d=2, n=5)
        np.testing.assert_allclose(p.A().data, -np.tile(np.arange(1, 6), (2, 1)), atol=1e-12)
        np.testing.assert_array_equal(p.d.data, 1.0)
        assert (p.A().data < 0).all()


class TestDiscretize:
    def test_a_zero(self, rng):
        B, delta = rng.standard_normal((4, 3)), rng.uniform(0.1, 1, (4, 2))
        a_bar, b_bar = discretize(np.zeros((2, 3)), B, delta)
        np.testing.assert_array_equal(a_bar, 1.0)
        np.testing.assert_allclose(b_bar, delta[..., None] * B[:, None, :])

    def test_small_step_freezes_state(self):
        a_bar, b_bar = discretize(-np.ones((1, 1)), np.ones((1, 1)), np.full((1, 1), 1e-12))
        assert a_bar[0, 0, 0] == pytest.approx(1.0)
        assert abs(b_bar[0, 0, 0]) < 1e-11

    def test_half(self):
        a_bar, _ = discretize(-np.ones((1, 1)), np.ones((1, 1)), np.full((1, 1), math.log(2)))
        assert a_bar[0, 0, 0] == pytest.approx(0.5, abs=1e-15)


class TestSelectiveScan:
    def test_single_step(self, rng):
        p = params()
        u = rng.standard_normal((1, 3))
        delta, B, C = (t.data for t in generate_params(Tensor(u), p))
        expected = (C @ B.T)[0, 0] * delta[0] * u[0] + p.d.data * u[0]
        np.testing.assert_allclose(selective_scan(Tensor(u), p).data[0], expected, atol=1e-13)

    def test_prefix_sum_case(self, rng):
        L, D = 7, 2
        u = Tensor(rng.standard_normal((L, D)))
        delta = Tensor(np.full((L, D), 0.3))
        y = selective_scan_op(u, delta, Tensor(np.zeros((D, 1))), Tensor(np.ones((L, 1))),
                              Tensor(np.ones((L, 1))), Tensor(np.zeros(D))).data
        np.testing.assert_allclose(y, np.cumsum(0.3 * u.data, axis=0), atol=1e-13)

    def test_zero_input_projection_leaves_skip(self, rng):
        p = params()
        p.w_b.data[...] = 0
        u = rng.standard_normal((9, 3))
        np.testing.assert_allclose(selective_scan(Tensor(u), p).data, u * p.d.data, atol=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_unrolled_oracle(self, seed):
        rng = np.random.default_rng(seed)
        L, D, N = int(rng.integers(1, 65)), int(rng.integers(1, 5)), int(rng.integers(1, 9))
        p = params(D, N, seed)
        p.d.data[...] = rng.standard_normal(D)
        u = rng.standard_normal((L, D))
        ref = oracles.ssm_recurrence(u, p.w_delta.data, p.b_delta.data, p.w_b.data, p.w_c.data, p.A().data, p.d.data)
        np.testing.assert_allclose(selective_scan(Tensor(u), p).data, ref, atol=1e-10, rtol=0)

    def test_batched_matches_per_sequence(self, rng):
        p = params()
        u = rng.standard_normal((3, 10, 3))
        batched = selective_scan(Tensor(u), p).data
        for i in range(3):
            np.testing.assert_allclose(batched[i], selective_scan(Tensor(u[i]), p).data, atol=1e-14)

    def test_state_bounded_by_geometric_series(self, rng):
        # |h_t| <= max|B_bar u| / (1 - max A_bar) when every A_bar < 1
        L, D, N = 200, 2, 3
        u = rng.uniform(-1, 1, (L, D))
        delta = rng.uniform(0.1, 0.5, (L, D))
        A = -rng.uniform(0.5, 2, (D, N))
        B = rng.uniform(-1, 1, (L, N))
        a_bar, b_bar = discretize(A, B, delta)
        drive = np.abs(b_bar * u[..., None]).max()
        bound = drive / (1 - a_bar.max())
        h = np.zeros((D, N))
        for t in range(L):
            h = a_bar[t] * h + b_bar[t] * u[t][:, None]
            assert np.abs(h).max() <= bound + 1e-12

    def test_gradients(self, rng):
        p = params(3, 4)
        u = Tensor(rng.standard_normal((2, 6, 3)), requires_grad=True)
        res = check_gradients(lambda: weighted_sum(selective_scan(u, p)), [u, *p.parameters()])
        assert res.passed, res

    @pytest.mark.parametrize("fwd,rev", [("row", "row_rev"), ("col", "col_rev")])
    def test_reverse_direction_equivariance(self, rng, fwd, rev):
        p = params()
        x = rng.standard_normal((3, 4, 6))
        flipped = Tensor(x[:, ::-1, ::-1].copy())
        y = selective_scan(scan(Tensor(x), fwd).seq, p).data
        y_rev = selective_scan(scan(flipped, rev).seq, p).data
        assert y.tobytes() == y_rev.tobytes()
        # and the reversed scan of the original reads the forward scan backwards
        np.testing.assert_array_equal(scan(Tensor(x), rev).seq.data, scan(Tensor(x), fwd).seq.data[::-1])


class TestVSSBlock:
    def block(self, dim=4, drop_path=0.0, seed=0):
        blk = VSSBlock(dim, 3, np.random.default_rng(seed), nn.Noise(seed), drop_path=drop_path)
        return blk.astype(np.float64)

    def test_zeroed_branches_are_identity(self, rng):
        blk = self.block()
        zero_branch_outputs(blk)
        x = Tensor(rng.standard_normal((4, 4, 8)))
        np.testing.assert_array_equal(blk(x).data, x.data)

    def test_shape_preserved(self, rng):
        blk = self.block()
        assert blk(Tensor(rng.standard_normal((2, 4, 4, 8)))).shape == (2, 4, 4, 8)

    def test_eval_ignores_drop_path(self, rng):
        blk = self.block(drop_path=0.5).eval()
        x = Tensor(rng.standard_normal((4, 4, 4, 8)))
        np.testing.assert_array_equal(blk(x).data, blk(x).data)

    def test_rate_one_rejected(self):
        with pytest.raises(ValueError):
            self.block(drop_path=1.0)

    def test_drop_path_preserves_expectation(self):
        x = Tensor(np.ones((20_000, 1, 1)))
        out = ops.drop_path(x, 0.3, True, ops.philox_generator(0, 0, 7)).data
        assert set(np.unique(out)) <= {0.0, 1 / 0.7}
        assert out.mean() == pytest.approx(1.0, abs=0.03)

    def test_gradient_check(self, rng):
        blk = self.block(drop_path=0.2)
        x = Tensor(rng.standard_normal((1, 4, 4, 8)), requires_grad=True)
        res = check_gradients(lambda: weighted_sum(blk(x)), [x, *blk.parameters()], max_elems=12)
        assert res.passed, res
