"""The finite-difference suite covering every differentiable op and composite layer.

Each case builds float64 leaves and a scalar objective; :func:`run_suite`
checks them all and reports the worst relative error per case.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import fcpg as fcpg_mod
from . import losses, nn
from .config import ModelConfig
from .decoder import Decoder, UnifiedHead
from .encoder import Encoder, PatchEmbed
from .gradcheck import GradCheckResult, check_gradients, weighted_sum
from .model import ChangeModel
from .scan import DIRECTIONS, aggregate_directions, inverse_scan, scan
from .ssm import SSMParams, VSSBlock, selective_scan, selective_scan_op
from .tensor import Tensor, ops

TOL = 1e-4
STEP = 1e-5


@dataclass
class Case:
    name: str
    build: Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]
    max_elems: int | None = None


def _leaf(rng, *shape, scale=1.0, positive=False):
    a = rng.standard_normal(shape) * scale
    if positive:
        a = np.abs(a) + 0.5
    return Tensor(a, requires_grad=True)


def _unary(op, positive=False):
    def build(rng):
        x = _leaf(rng, 3, 4, positive=positive)
        return (lambda: weighted_sum(op(x))), [x]
    return build


def _binary(op, positive_b=False):
    def build(rng):
        a, b = _leaf(rng, 3, 4), _leaf(rng, 1, 4, positive=positive_b)
        return (lambda: weighted_sum(op(a, b))), [a, b]
    return build


def _conv(cin, cout, k, stride, pad, groups=1, hw=6, batch=2):
    def build(rng):
        x = _leaf(rng, batch, cin, hw, hw)
        w = _leaf(rng, cout, cin // groups, k, k)
        b = _leaf(rng, cout)
        return (lambda: weighted_sum(ops.conv2d(x, w, b, stride, pad, groups))), [x, w, b]
    return build


def _params(module: nn.Module) -> list[Tensor]:
    return [p for p in module.parameters() if p.requires_grad]


def _getitem(rng):
    x = _leaf(rng, 4, 5)
    idx = np.array([0, 2, 2, 3])
    return (lambda: weighted_sum(ops.getitem(x, (idx, slice(1, 4))))), [x]


def _concat(rng):
    a, b = _leaf(rng, 2, 3), _leaf(rng, 2, 2)
    return (lambda: weighted_sum(ops.concat([a, b], axis=1))), [a, b]


def _shape_ops(rng):
    x = _leaf(rng, 2, 3, 4)
    return (lambda: weighted_sum(ops.flip(ops.reshape(ops.transpose(x, (2, 0, 1)), (4, 6)), 1))), [x]


def _reductions(rng):
    x = _leaf(rng, 3, 4, 2)
    return (lambda: ops.add(weighted_sum(ops.sum(x, axis=1)), weighted_sum(ops.mean(x, axis=(0, 2))))), [x]


def _matmul(rng):
    a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5)
    return (lambda: weighted_sum(ops.matmul(a, b))), [a, b]


def _linear(rng):
    x, w, b = _leaf(rng, 2, 3, 4), _leaf(rng, 5, 4), _leaf(rng, 5)
    return (lambda: weighted_sum(ops.linear(x, w, b))), [x, w, b]


def _layer_norm(rng):
    x, g, b = _leaf(rng, 2, 3, 4, 4), _leaf(rng, 1, 3, 1, 1), _leaf(rng, 1, 3, 1, 1)
    return (lambda: weighted_sum(ops.layer_norm(x, g, b, axis=1))), [x, g, b]


def _batch_norm(rng):
    x, g, b = _leaf(rng, 3, 2, 3, 3), _leaf(rng, 2), _leaf(rng, 2)
    rm, rv = np.zeros(2), np.ones(2)
    return (lambda: weighted_sum(ops.batch_norm(x, g, b, rm, rv, True))), [x, g, b]


def _upsample(rng):
    x = _leaf(rng, 1, 2, 3, 4)
    return (lambda: weighted_sum(ops.bilinear_upsample(x, 2))), [x]


def _spectral(rng):
    x = _leaf(rng, 2, 3, 8, 8)
    m = Tensor(rng.uniform(0, 1, (8, 8)), requires_grad=True)
    return (lambda: weighted_sum(ops.spectral_filter(x, m))), [x, m]


def _dropout(rng):
    x = _leaf(rng, 3, 4)
    return (lambda: weighted_sum(ops.dropout(x, 0.3, True, ops.philox_generator(0, 0, 1)))), [x]


def _drop_path(rng):
    x = _leaf(rng, 4, 2, 3)
    return (lambda: weighted_sum(ops.drop_path(x, 0.3, True, ops.philox_generator(0, 0, 2)))), [x]


def _scan_kernel(rng):
    u = _leaf(rng, 2, 7, 3)
    delta = Tensor(rng.uniform(0.05, 0.5, (2, 7, 3)), requires_grad=True)
    a = Tensor(-rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True)
    b, c, d = _leaf(rng, 2, 7, 4), _leaf(rng, 2, 7, 4), _leaf(rng, 3)
    return (lambda: weighted_sum(selective_scan_op(u, delta, a, b, c, d))), [u, delta, a, b, c, d]


def _selective_scan(rng):
    p = SSMParams(3, 4, rng)
    p.astype(np.float64)
    u = _leaf(rng, 2, 6, 3)
    return (lambda: weighted_sum(selective_scan(u, p))), [u, *_params(p)]


def _scan_roundtrip(rng):
    x = _leaf(rng, 1, 2, 3, 4)
    return (lambda: weighted_sum(aggregate_directions(*[inverse_scan(scan(x, d)) for d in DIRECTIONS])), [x])


def _vss_block(rng):
    noise = nn.Noise(0)
    blk = VSSBlock(4, 3, rng, noise, drop_path=0.2)
    blk.astype(np.float64)
    x = _leaf(rng, 2, 4, 4, 6)
    return (lambda: weighted_sum(blk(x))), [x, *_params(blk)]


def _band_masks(rng):
    raw = Tensor(fcpg_mod.raw_from_thresholds(0.2, 0.5), requires_grad=True)
    freq = fcpg_mod.radial_frequency_map(8, 8)

    def fn():
        lo, hi = fcpg_mod.thresholds_from_raw(raw)
        m_low, m_high = fcpg_mod.band_masks(freq, lo, hi, 0.05, "soft")
        return ops.add(weighted_sum(m_low, 1), weighted_sum(m_high, 2))
    return fn, [raw]


def _fcpg(mode: str, spm: bool):
    def build(rng):
        mod = fcpg_mod.FCPG(8, rng, mode=mode, spm=spm, groups=2, tau=0.05, alpha=0.5)
        mod.astype(np.float64)
        x = _leaf(rng, 2, 8, 8, 8)
        return (lambda: weighted_sum(mod(x))), [x, *_params(mod)]
    return build


def _decoder(rng):
    dec = Decoder((4, 8, 16, 32), 6, rng)
    dec.astype(np.float64)
    levels = [_leaf(rng, 1, c, 8 >> i, 16 >> i) for i, c in enumerate((4, 8, 16, 32))]
    return (lambda: weighted_sum(dec(levels))), [*levels, *_params(dec)]


def _patch_embed(rng):
    pe = PatchEmbed(3, 4, 4, rng)
    pe.astype(np.float64)
    x = _leaf(rng, 1, 3, 8, 16)
    return (lambda: weighted_sum(pe(x))), [x, *_params(pe)]


def _encoder(rng):
    enc = Encoder(ModelConfig.tiny(), rng, nn.Noise(0))
    enc.astype(np.float64).eval()
    x = _leaf(rng, 1, 3, 32, 64)

    def fn():
        total = None
        for i, lv in enumerate(enc(x).levels):
            s = weighted_sum(lv, i + 1)
            total = s if total is None else ops.add(total, s)
        return total
    return fn, [x, *_params(enc)]


def _unified_head(training: bool):
    def build(rng):
        head = UnifiedHead(6, 8, rng, nn.Noise(3), p=0.2, act="gelu")
        head.astype(np.float64)
        for m in head.modules():
            for k in getattr(m, "buffers", {}):
                m.buffers[k] = rng.uniform(0.5, 1.5, m.buffers[k].shape) if k == "running_var" \
                    else rng.standard_normal(m.buffers[k].shape) * 0.1
        head.train(training)
        x = _leaf(rng, 2, 6, 4, 4)
        return (lambda: weighted_sum(head(x))), [x, *_params(head)]
    return build


def _cross_entropy(rng):
    x = _leaf(rng, 2, 3, 4, 4)
    y = rng.integers(0, 3, (2, 4, 4))
    y[0, 0, 0] = losses.IGNORE_INDEX
    w = np.array([0.5, 1.0, 1.5])
    return (lambda: losses.cross_entropy(x, y, w)), [x]


def _lovasz_softmax(rng):
    x = _leaf(rng, 2, 3, 4, 4, scale=2.0)
    y = rng.integers(0, 3, (2, 4, 4))
    return (lambda: losses.lovasz_softmax(ops.softmax(x, axis=1), y)), [x]


def _lovasz_hinge(rng):
    x = _leaf(rng, 4, 4, scale=2.0)
    y = rng.integers(0, 2, (4, 4))
    return (lambda: losses.lovasz_hinge(x, y)), [x]


def _similarity(rng):
    a, b = _leaf(rng, 2, 4, 3, 3), _leaf(rng, 2, 4, 3, 3)
    ch = rng.integers(0, 2, (2, 3, 3))
    return (lambda: losses.temporal_similarity(a, b, ch)), [a, b]


def tiny_model(task: str = "scd", seed: int = 0) -> ChangeModel:
    """Smallest full network; smooth head activation keeps finite differences away from kinks."""
    return ChangeModel(ModelConfig.tiny(task=task, head_activation="gelu", seed=seed), dtype=np.float64)


def _full_model(task: str):
    def build(rng):
        model = tiny_model(task).eval()
        pre, post = rng.random((1, 3, 32, 32)), rng.random((1, 3, 32, 32))
        if model.cfg.kind.value == "scd":
            # the suppression gate is a constant in the graph; hold it at its base-point value
            out = model(pre, post)
            model.head.outputs.fixed_gate = ops.softmax(out.change, axis=1).data[:, 1:2].copy()

        def fn():
            out = model(pre, post)
            total = None
            for i, (_, t) in enumerate(out.items()):
                s = weighted_sum(t, i + 1)
                total = s if total is None else ops.add(total, s)
            return total
        return fn, _params(model)
    return build


CASES: list[Case] = [
    Case("add", _binary(ops.add)),
    Case("sub", _binary(ops.sub)),
    Case("mul", _binary(ops.mul)),
    Case("div", _binary(ops.div, positive_b=True)),
    Case("power", _unary(lambda x: ops.power(x, 3.0))),
    Case("exp", _unary(ops.exp)),
    Case("log", _unary(ops.log, positive=True)),
    Case("sqrt", _unary(ops.sqrt, positive=True)),
    Case("abs", _unary(ops.abs)),
    Case("relu", _unary(ops.relu)),
    Case("sigmoid", _unary(ops.sigmoid)),
    Case("softplus", _unary(ops.softplus)),
    Case("silu", _unary(ops.silu)),
    Case("gelu", _unary(ops.gelu)),
    Case("tanh", _unary(ops.tanh)),
    Case("softmax", _unary(lambda x: ops.softmax(x, axis=1))),
    Case("log_softmax", _unary(lambda x: ops.log_softmax(x, axis=1))),
    Case("sum_mean", _reductions),
    Case("reshape_transpose_flip", _shape_ops),
    Case("getitem", _getitem),
    Case("concat", _concat),
    Case("matmul", _matmul),
    Case("linear", _linear),
    Case("conv2d_1x1", _conv(3, 4, 1, 1, 0)),
    Case("conv2d_3x3", _conv(3, 4, 3, 1, 1)),
    Case("conv2d_3x3_stride2", _conv(2, 3, 3, 2, 1)),
    Case("conv2d_patch", _conv(3, 4, 2, 2, 0, hw=8)),
    Case("conv2d_depthwise", _conv(3, 3, 3, 1, 1, groups=3)),
    Case("layer_norm", _layer_norm),
    Case("batch_norm", _batch_norm),
    Case("bilinear_upsample", _upsample),
    Case("spectral_filter", _spectral),
    Case("dropout", _dropout),
    Case("drop_path", _drop_path),
    Case("selective_scan_kernel", _scan_kernel),
    Case("selective_scan", _selective_scan),
    Case("scan_inverse_scan", _scan_roundtrip),
    Case("vss_block", _vss_block, max_elems=24),
    Case("band_masks", _band_masks),
    Case("fcpg_adaptive", _fcpg("adaptive", True), max_elems=24),
    Case("fcpg_fixed_no_spm", _fcpg("fixed", False), max_elems=24),
    Case("patch_embed", _patch_embed, max_elems=24),
    Case("encoder", _encoder, max_elems=3),
    Case("decoder", _decoder, max_elems=16),
    Case("unified_head_eval", _unified_head(False), max_elems=24),
    Case("unified_head_train", _unified_head(True), max_elems=24),
    Case("cross_entropy", _cross_entropy),
    Case("lovasz_softmax", _lovasz_softmax),
    Case("lovasz_hinge", _lovasz_hinge),
    Case("temporal_similarity", _similarity),
    Case("model_bcd", _full_model("bcd"), max_elems=3),
    Case("model_scd", _full_model("scd"), max_elems=3),
    Case("model_bda", _full_model("bda"), max_elems=3),
]


def run_case(case: Case, seed: int = 0, tol: float = TOL) -> GradCheckResult:
    rng = np.random.default_rng(seed)
    fn, inputs = case.build(rng)
    return check_gradients(fn, inputs, h=STEP, tol=tol, max_elems=case.max_elems, seed=seed, name=case.name)


def run_suite(names=None, seed: int = 0, tol: float = TOL) -> list[GradCheckResult]:
    cases = CASES if names is None else [c for c in CASES if c.name in set(names)]
    return [run_case(c, seed, tol) for c in cases]


def format_report(results: list[GradCheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{r.name:<{width}}  {r.max_rel_err:.3e}  {'PASS' if r.passed else 'FAIL'}  ({r.checked} entries)"
             for r in results]
    failed = [r.name for r in results if not r.passed]
    lines.append(f"{len(results) - len(failed)}/{len(results)} passed" + (f"; failed: {', '.join(failed)}" if failed else ""))
    return "\n".join(lines)
