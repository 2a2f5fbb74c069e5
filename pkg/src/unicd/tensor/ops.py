"""Differentiable operations on :class:`Tensor`.

Each op computes its forward value with numpy and registers a closure that
maps the output gradient to the gradients of its inputs.  Layouts are NCHW
for feature maps and (batch, length, channels) for sequences.
"""
from __future__ import annotations

import builtins
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from .core import DimensionError, Tensor, as_tensor, make_result

_SQRT_2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic ------------------------------------------------------

def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape
    return make_result(a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape
    return make_result(a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    ad, bd = a.data, b.data

    def backward(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return make_result(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return make_result(out, (a, b), backward, "div")


def neg(x: Tensor) -> Tensor:
    return make_result(-x.data, (x,), lambda g: (-g,), "neg")


def power(x: Tensor, exponent: float) -> Tensor:
    xd = x.data
    return make_result(xd ** exponent, (x,),
                       lambda g: (g * exponent * xd ** (exponent - 1),), "power")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return make_result(np.log(xd), (x,), lambda g: (g / xd,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return make_result(out, (x,), lambda g: (0.5 * g / out,), "sqrt")


def abs(x: Tensor) -> Tensor:  # noqa: A001
    xd = x.data
    return make_result(np.abs(xd), (x,), lambda g: (g * np.sign(xd),), "abs")


# -- activations -----------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    out = special.expit(x.data)
    return make_result(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    return make_result(np.logaddexp(0, xd), (x,), lambda g: (g * special.expit(xd),), "softplus")


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = special.expit(xd)
    return make_result(xd * s, (x,), lambda g: (g * (s + xd * s * (1 - s)),), "silu")


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + special.erf(xd / _SQRT_2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
    return make_result(xd * cdf, (x,), lambda g: (g * (cdf + xd * pdf),), "gelu")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return make_result(out, (x,), lambda g: (g * (1 - out * out),), "tanh")


ACTIVATIONS = {"relu": relu, "gelu": gelu, "silu": silu, "sigmoid": sigmoid, "softplus": softplus}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        return ACTIVATIONS[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(ACTIVATIONS)}") from None


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = 1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), backward, "log_softmax")


# -- reductions and shape ----------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape
    axes = _norm_axes(axis, x.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(np.asarray(x.data.sum(axis=axes, keepdims=keepdims)), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    shape = x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape).copy(),)

    return make_result(np.asarray(x.data.mean(axis=axes, keepdims=keepdims)), (x,), backward, "mean")


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return make_result(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                       lambda g: (g.transpose(inv),), "transpose")


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return builtins.any(isinstance(i, (list, np.ndarray)) for i in items)


def getitem(x: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        index = index.data
    shape, dtype = x.shape, x.dtype
    advanced = _is_advanced(index)

    def backward(g):
        gx = np.zeros(shape, dtype=dtype)
        if advanced:
            np.add.at(gx, index, g)
        else:
            gx[index] += g
        return (gx,)

    return make_result(np.array(x.data[index]), (x,), backward, "getitem")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def flip(x: Tensor, axis: int) -> Tensor:
    return make_result(np.flip(x.data, axis).copy(), (x,), lambda g: (np.flip(g, axis).copy(),), "flip")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(ad @ bd, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis."""
    out = matmul(x, transpose(weight))
    return out if bias is None else add(out, bias)


# -- convolution ------------------------------------------------------------------

def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    if k == 1 and stride == 1:
        return xp.transpose(0, 2, 3, 1).reshape(-1, c)
    if k == stride and xp.shape[2] == k * ho and xp.shape[3] == k * wo:
        return xp.reshape(n, c, ho, k, wo, k).transpose(0, 2, 4, 1, 3, 5).reshape(n * ho * wo, c * k * k)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)


def _shift_buffer(x: np.ndarray, pad: int, k: int) -> tuple[np.ndarray, int, int, int]:
    """Zero-padded NHWC copy of ``x`` flattened to rows, with slack rows so every tap slice fits."""
    n, c, h, w = x.shape
    hp, wp = h + 2 * pad, w + 2 * pad
    m = n * hp * wp
    buf = np.zeros((m + (k - 1) * (wp + 1), c), dtype=x.dtype)
    buf[:m].reshape(n, hp, wp, c)[:, pad:pad + h, pad:pad + w, :] = x.transpose(0, 2, 3, 1)
    return buf, hp, wp, m


def _conv_s1_forward(xd: np.ndarray, wd: np.ndarray, pad: int):
    """Stride-1 conv as one GEMM per kernel tap over contiguous row slices of the padded buffer."""
    n = xd.shape[0]
    cout, _, k, _ = wd.shape
    buf, hp, wp, m = _shift_buffer(xd, pad, k)
    taps = np.ascontiguousarray(wd.transpose(2, 3, 1, 0))
    out = buf[:m] @ taps[0, 0]
    for i in range(k):
        for j in range(k):
            if i or j:
                off = i * wp + j
                out += buf[off:off + m] @ taps[i, j]
    ho, wo = hp - k + 1, wp - k + 1
    return out.reshape(n, hp, wp, cout)[:, :ho, :wo, :].transpose(0, 3, 1, 2), (buf, hp, wp, m)


def conv2d_backward(g, saved, wd, x_shape, stride, pad, groups):
    """Gradients of :func:`conv2d` w.r.t. input and weight (bias handled by caller)."""
    n, cin, h, w = x_shape
    cout, _, k, _ = wd.shape
    ho, wo = g.shape[2], g.shape[3]
    if groups != 1:
        xp = saved
        gw = np.zeros_like(wd)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                win = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
                gw[:, 0, i, j] = (g * win).sum(axis=(0, 2, 3))
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g * wd[None, :, 0, i, j, None, None]
        gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        return gx, gw
    if stride == 1:
        buf, hp, wp, m = saved
        gfull = np.zeros((m, cout), dtype=g.dtype)
        gfull.reshape(n, hp, wp, cout)[:, :ho, :wo, :] = g.transpose(0, 2, 3, 1)
        taps_t = np.ascontiguousarray(wd.transpose(2, 3, 0, 1))
        gtaps = np.empty((k, k, cin, cout), dtype=g.dtype)
        gbuf = np.zeros_like(buf)
        for i in range(k):
            for j in range(k):
                off = i * wp + j
                gtaps[i, j] = buf[off:off + m].T @ gfull
                gbuf[off:off + m] += gfull @ taps_t[i, j]
        gx = gbuf[:m].reshape(n, hp, wp, cin)[:, pad:pad + h, pad:pad + w, :].transpose(0, 3, 1, 2)
        return gx, gtaps.transpose(3, 2, 0, 1)
    cols = saved
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
    gw = (g2.T @ cols).reshape(wd.shape)
    gcols = g2 @ wd.reshape(cout, -1)
    if k == stride and pad == 0 and h == k * ho and w == k * wo:
        gx = gcols.reshape(n, ho, wo, cin, k, k).transpose(0, 3, 1, 4, 2, 5).reshape(n, cin, h, w)
        return gx, gw
    gcols = gcols.reshape(n, ho, wo, cin, k, k)
    gxp = np.zeros((n, cin, h + 2 * pad, w + 2 * pad), dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
    return gx, gw


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0,
           groups: int = 1) -> Tensor:
    """2-D cross-correlation on NCHW input.

    ``groups`` is 1 (dense) or equal to the channel count (depthwise).
    """
    xd, wd = x.data, weight.data
    if xd.ndim == 3:
        out = conv2d(reshape(x, (1,) + x.shape), weight, bias, stride, pad, groups)
        return reshape(out, out.shape[1:])
    n, cin, h, w = xd.shape
    cout, cin_g, k, k2 = wd.shape
    if k != k2:
        raise DimensionError(f"square kernels only, got {k}x{k2}")
    if cin_g * groups != cin:
        raise DimensionError(f"input has {cin} channels but weight expects {cin_g * groups}")
    if groups not in (1, cin) or (groups != 1 and cout != cin):
        raise DimensionError("groups must be 1 or equal to the channel count (depthwise)")
    ho, wo = _conv_out(h, k, stride, pad), _conv_out(w, k, stride, pad)
    if ho < 1 or wo < 1:
        raise DimensionError(f"kernel {k} with pad {pad} does not fit input {h}x{w}")
    if groups == 1 and stride == 1:
        out, saved = _conv_s1_forward(xd, wd, pad)
    elif groups == 1:
        xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
        saved = _im2col(xp, k, stride, ho, wo)
        out = (saved @ wd.reshape(cout, -1).T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
        out = np.zeros((n, cout, ho, wo), dtype=np.result_type(xd, wd))
        for i in range(k):
            for j in range(k):
                out += xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] * wd[None, :, 0, i, j, None, None]
        saved = xp
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        gx, gw = conv2d_backward(g, saved, wd, xd.shape, stride, pad, groups)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, "conv2d")


# -- normalization ------------------------------------------------------------------

def _check_eps(eps: float, group: int) -> None:
    if eps <= 0 and group <= 1:
        raise ZeroDivisionError("normalization over a group of size 1 needs eps > 0")


def _normalize_backward(g, xhat, inv, gamma_b, axes, count):
    dxhat = g * gamma_b if gamma_b is not None else g
    s1 = dxhat.sum(axis=axes, keepdims=True)
    s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
    return inv / count * (count * dxhat - s1 - xhat * s2)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize over one axis (channels), then scale and shift along that axis."""
    axis = axis % x.ndim
    count = x.shape[axis]
    _check_eps(eps, count)
    xd = x.data
    mu = xd.mean(axis=axis, keepdims=True)
    var = xd.var(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    bshape = [1] * x.ndim
    bshape[axis] = count
    gb, bb = gamma.data.reshape(bshape), beta.data.reshape(bshape)
    red = tuple(i for i in range(x.ndim) if i != axis)

    def backward(g):
        gx = _normalize_backward(g, xhat, inv, gb, axis, count)
        return gx, (g * xhat).sum(axis=red).reshape(gamma.shape), g.sum(axis=red).reshape(beta.shape)

    return make_result(xhat * gb + bb, (x, gamma, beta), backward, "layer_norm")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization of NCHW input; updates running stats in place when training."""
    xd = x.data
    axes = (0, 2, 3)
    count = xd.shape[0] * xd.shape[2] * xd.shape[3]
    gb, bb = gamma.data[None, :, None, None], beta.data[None, :, None, None]
    if training:
        _check_eps(eps, count)
        mu = xd.mean(axis=axes, keepdims=True)
        var = xd.var(axis=axes, keepdims=True)
        running_mean *= 1 - momentum
        running_mean += momentum * mu.ravel()
        unbiased = var.ravel() * (count / max(count - 1, 1))
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        mu = running_mean[None, :, None, None]
        var = running_var[None, :, None, None]
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv

    def backward(g):
        if training:
            gx = _normalize_backward(g, xhat, inv, gb, axes, count)
        else:
            gx = g * gb * inv
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return make_result((xhat * gb + bb).astype(xd.dtype, copy=False), (x, gamma, beta), backward, "batch_norm")


# -- resampling -----------------------------------------------------------------------

def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Row i holds the bilinear weights of output sample i (half-pixel centers)."""
    scale = n_in / n_out
    m = np.zeros((n_out, n_in), dtype=dtype)
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[i, i0] += 1 - lam
        m[i, i1] += lam
    return m


def resize_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    h, w = x.shape[-2:]
    uh = _interp_matrix(h, size[0], x.dtype)
    uw = _interp_matrix(w, size[1], x.dtype)
    out = uh @ x.data @ uw.T
    return make_result(out, (x,), lambda g: (uh.T @ g @ uw,), "bilinear")


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    """Upsample the last two axes by an integer factor (align_corners=False)."""
    if factor < 1 or int(factor) != factor:
        raise ValueError(f"upsampling factor must be an integer >= 1, got {factor}")
    if factor == 1:
        return x
    h, w = x.shape[-2:]
    return resize_bilinear(x, (h * factor, w * factor))


# -- stochastic regularizers ---------------------------------------------------------------

def philox_generator(seed: int, step: int, layer_id: int) -> np.random.Generator:
    """Counter-based generator keyed by (seed, layer) with the step in the counter."""
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, layer_id & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
    counter = np.array([0, 0, 0, step & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(counter=counter, key=key))


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: zero with probability ``p``, rescale survivors by 1/(1-p)."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1 - p)
    return make_result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def drop_path(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Drop whole samples of a residual branch (stochastic depth)."""
    if not 0 <= p < 1:
        raise ValueError(f"drop-path rate must be in [0, 1), got {p}")
    if not training or p == 0:
        return x
    shape = (x.shape[0],) + (1,) * (x.ndim - 1)
    keep = (rng.random(shape) >= p).astype(x.dtype) / (1 - p)
    return make_result(x.data * keep, (x,), lambda g: (g * keep,), "drop_path")


# -- spectral ------------------------------------------------------------------------------------

def fft2d(x) -> np.ndarray:
    """Unnormalized 2-D DFT over the last two axes."""
    x = x.data if isinstance(x, Tensor) else np.asarray(x)
    return np.fft.fft2(x, axes=(-2, -1))


def ifft2d(spec: np.ndarray, real: bool = True) -> np.ndarray:
    """Inverse of :func:`fft2d` (1/(HW) normalization); drops the imaginary part if ``real``."""
    out = np.fft.ifft2(spec, axes=(-2, -1))
    return out.real if real else out


def spectral_filter(x: Tensor, mask: Tensor) -> Tensor:
    """``Re(ifft2(mask * fft2(x)))`` with a real (H, W) frequency mask.

    The map is self-adjoint for real masks, so the input gradient is the same
    filter applied to the output gradient.
    """
    if mask.shape != x.shape[-2:]:
        raise DimensionError(f"mask {mask.shape} does not match spatial dims {x.shape[-2:]}")
    xd, md = x.data, mask.data
    spec = np.fft.fft2(xd, axes=(-2, -1))
    out = np.fft.ifft2(spec * md, axes=(-2, -1)).real.astype(xd.dtype, copy=False)

    def backward(g):
        gx = np.fft.ifft2(np.fft.fft2(g, axes=(-2, -1)) * md, axes=(-2, -1)).real if x.requires_grad else None
        gm = None
        if mask.requires_grad:
            lead = tuple(range(xd.ndim - 2))
            gm = (spec * np.fft.ifft2(g, axes=(-2, -1))).real.sum(axis=lead)
        return gx, gm

    return make_result(out, (x, mask), backward, "spectral_filter")
