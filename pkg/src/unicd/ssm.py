"""Selective state-space recurrence and the visual state-space (VSS) block."""
from __future__ import annotations

import numpy as np

from . import nn
from .nn import Module, Parameter
from .scan import DIRECTIONS, ScanSequence, aggregate_directions, inverse_scan, scan
from .tensor import Tensor, ops
from .tensor.core import make_result


class SSMParams(Module):
    """Projections producing the per-token step size and input/output vectors.

    ``A = -exp(a_log)`` is kept strictly negative; ``a_log`` starts at
    ``log(1..N)`` per channel and the skip ``D`` starts at one.
    """

    def __init__(self, d_model: int, n_state: int, rng: np.random.Generator,
                 dt_min: float = 1e-3, dt_max: float = 1e-1):
        self.d_model, self.n_state = d_model, n_state
        self.w_delta = Parameter(rng.standard_normal((d_model, d_model)) * 0.1 / np.sqrt(d_model))
        dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), d_model))
        self.b_delta = Parameter(dt + np.log(-np.expm1(-dt)))
        self.w_b = Parameter(rng.standard_normal((n_state, d_model)) / np.sqrt(d_model))
        self.w_c = Parameter(rng.standard_normal((n_state, d_model)) / np.sqrt(d_model))
        self.a_log = Parameter(np.log(np.tile(np.arange(1, n_state + 1, dtype=np.float64), (d_model, 1))))
        self.d = Parameter(np.ones(d_model))

    def A(self) -> Tensor:
        return ops.neg(ops.exp(self.a_log))


def generate_params(x: Tensor, p: SSMParams) -> tuple[Tensor, Tensor, Tensor]:
    """Input-dependent step size, input vector and output vector for each token of ``x``."""
    delta = ops.softplus(ops.linear(x, p.w_delta, p.b_delta))
    return delta, ops.linear(x, p.w_b), ops.linear(x, p.w_c)


def discretize(A, B, delta) -> tuple[np.ndarray, np.ndarray]:
    """``A_bar = exp(delta*A)`` and ``B_bar = delta*B`` for every token.

    ``A``: (D, N), ``B``: (L, N), ``delta``: (L, D) -> both outputs (L, D, N).
    """
    A, B, delta = (np.asarray(getattr(v, "data", v), dtype=np.float64) for v in (A, B, delta))
    return np.exp(delta[..., None] * A), delta[..., None] * B[..., None, :]


def _scan_forward(dA: np.ndarray, dBu: np.ndarray) -> np.ndarray:
    hs = np.empty_like(dBu)
    hs[0] = dBu[0]
    for t in range(1, dBu.shape[0]):
        np.multiply(dA[t], hs[t - 1], out=hs[t])
        hs[t] += dBu[t]
    return hs


def _scan_backward(dA: np.ndarray, gh: np.ndarray) -> np.ndarray:
    for t in range(gh.shape[0] - 2, -1, -1):
        gh[t] += dA[t + 1] * gh[t + 1]
    return gh


def selective_scan_op(u: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor, D: Tensor) -> Tensor:
    """Run ``h_t = exp(delta_t A) h_{t-1} + delta_t B_t u_t``, ``y_t = C_t h_t + D u_t`` from ``h_0 = 0``.

    Shapes: ``u``/``delta`` (batch, L, D), ``B``/``C`` (batch, L, N), ``A`` (D, N),
    ``D`` (D,).  Unbatched (L, ·) inputs are accepted.  The recurrence runs
    sequentially over L; the backward pass is the adjoint recurrence run in
    reverse.
    """
    ud, dd, Ad, Bd, Cd, Dd = (t.data for t in (u, delta, A, B, C, D))
    unbatched = ud.ndim == 2
    if unbatched:
        ud, dd, Bd, Cd = ud[None], dd[None], Bd[None], Cd[None]
    # time-major so each step touches a contiguous block
    uT = ud.transpose(1, 0, 2)
    dT = dd.transpose(1, 0, 2)
    BT = Bd.transpose(1, 0, 2)
    CT = Cd.transpose(1, 0, 2)
    dA = np.exp(dT[..., None] * Ad)
    du = dT * uT
    dBu = du[..., None] * BT[:, :, None, :]
    hs = _scan_forward(dA, dBu)
    yT = (hs @ CT[..., None])[..., 0] + uT * Dd
    y = yT.transpose(1, 0, 2)
    y = np.ascontiguousarray(y[0] if unbatched else y)

    def backward(g):
        gT = (g[None] if unbatched else g).transpose(1, 0, 2)
        gC = (gT[:, :, None, :] @ hs)[:, :, 0, :]
        gh = _scan_backward(dA, gT[..., None] * CT[:, :, None, :])
        h_prev = np.concatenate([np.zeros_like(hs[:1]), hs[:-1]], axis=0)
        term = gh * h_prev * dA
        s = (gh @ BT[..., None])[..., 0]
        g_delta = (term * Ad).sum(-1) + s * uT
        g_u = s * dT + gT * Dd
        gA = (term * dT[..., None]).sum(axis=(0, 1))
        gB = (du[:, :, None, :] @ gh)[:, :, 0, :]
        gD = (gT * uT).sum(axis=(0, 1))

        def back(a):
            a = a.transpose(1, 0, 2)
            return a[0] if unbatched else a

        return back(g_u), back(g_delta), gA, back(gB), back(gC), gD

    return make_result(y, (u, delta, A, B, C, D), backward, "selective_scan")


def selective_scan(u: Tensor, p: SSMParams) -> Tensor:
    """Selective SSM over a token sequence ``u`` of shape (L, D) or (batch, L, D)."""
    delta, B, C = generate_params(u, p)
    return selective_scan_op(u, delta, p.A(), B, C, p.d)


class VSSBlock(Module):
    """Norm -> depthwise conv -> SiLU -> 4-direction selective scan -> projection, plus an MLP branch.

    Both branches are residual and wrapped in drop-path.  The four directions
    share one set of SSM parameters.
    """

    def __init__(self, dim: int, n_state: int, rng: np.random.Generator, noise: nn.Noise,
                 drop_path: float = 0.0, mlp_ratio: int = 2):
        self.norm1 = nn.ChannelNorm(dim)
        self.dwconv = nn.Conv2d(dim, dim, 3, rng, groups=dim)
        self.ssm = SSMParams(dim, n_state, rng)
        self.out_proj = nn.Conv2d(dim, dim, 1, rng)
        self.norm2 = nn.ChannelNorm(dim)
        self.fc1 = nn.Conv2d(dim, dim * mlp_ratio, 1, rng)
        self.fc2 = nn.Conv2d(dim * mlp_ratio, dim, 1, rng)
        self.drop_path1 = nn.DropPath(drop_path, noise)
        self.drop_path2 = nn.DropPath(drop_path, noise)

    def ssm_branch(self, x: Tensor) -> Tensor:
        h = ops.silu(self.dwconv(self.norm1(x)))
        n = h.shape[0]
        seqs = [scan(h, d) for d in DIRECTIONS]
        u = ops.concat([s.seq for s in seqs], axis=0)
        y = selective_scan(u, self.ssm)
        maps = [inverse_scan(ScanSequence(s.direction, ops.getitem(y, slice(i * n, (i + 1) * n)), s.origin_shape))
                for i, s in enumerate(seqs)]
        return self.out_proj(aggregate_directions(*maps))

    def mlp_branch(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(self.norm2(x))))

    def forward(self, x: Tensor) -> Tensor:
        unbatched = x.ndim == 3
        if unbatched:
            x = ops.reshape(x, (1,) + x.shape)
        x = ops.add(x, self.drop_path1(self.ssm_branch(x)))
        x = ops.add(x, self.drop_path2(self.mlp_branch(x)))
        return ops.reshape(x, x.shape[1:]) if unbatched else x


def vss_block(x: Tensor, block: VSSBlock) -> Tensor:
    return block(x)
