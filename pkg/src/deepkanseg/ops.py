"""Primitive tensor operations: forward kernels and their backward rules.

Each primitive is registered with the tape in :mod:`deepkanseg.tensor`.
Forward kernels work on plain numpy arrays and return ``(out, ctx)``;
backward rules receive ``ctx``, the output gradient, and a ``needs`` tuple
saying which input slots actually require a gradient.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import (AutodiffError, ShapeError, Tensor, apply_op,
                     register_primitive)


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _check_same_dtype(op: str, *arrays: np.ndarray) -> None:
    first = arrays[0].dtype
    for a in arrays[1:]:
        if a.dtype != first:
            raise AutodiffError(f"{op}: mixed dtypes {first} and {a.dtype}")


def const(value, like: Tensor) -> Tensor:
    """Wrap a python scalar as a non-trainable tensor matching ``like``'s dtype."""
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape))
                 if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --------------------------------------------------------------------------
# Elementwise arithmetic (with numpy broadcasting)
# --------------------------------------------------------------------------

def _add_fwd(a, b):
    _check_same_dtype("add", a, b)
    return a + b, (a.shape, b.shape)


def _add_bwd(ctx, g, needs):
    sa, sb = ctx
    return (_unbroadcast(g, sa) if needs[0] else None,
            _unbroadcast(g, sb) if needs[1] else None)


def _sub_fwd(a, b):
    _check_same_dtype("sub", a, b)
    return a - b, (a.shape, b.shape)


def _sub_bwd(ctx, g, needs):
    sa, sb = ctx
    return (_unbroadcast(g, sa) if needs[0] else None,
            _unbroadcast(-g, sb) if needs[1] else None)


def _mul_fwd(a, b):
    _check_same_dtype("mul", a, b)
    return a * b, (a, b)


def _mul_bwd(ctx, g, needs):
    a, b = ctx
    return (_unbroadcast(g * b, a.shape) if needs[0] else None,
            _unbroadcast(g * a, b.shape) if needs[1] else None)


def _div_fwd(a, b):
    _check_same_dtype("div", a, b)
    return a / b, (a, b)


def _div_bwd(ctx, g, needs):
    a, b = ctx
    ga = _unbroadcast(g / b, a.shape) if needs[0] else None
    gb = _unbroadcast(-g * a / (b * b), b.shape) if needs[1] else None
    return ga, gb


def _neg_fwd(a):
    return -a, None


def _neg_bwd(ctx, g, needs):
    return (-g,)


register_primitive("add", _add_fwd, _add_bwd)
register_primitive("sub", _sub_fwd, _sub_bwd)
register_primitive("mul", _mul_fwd, _mul_bwd)
register_primitive("div", _div_fwd, _div_bwd)
register_primitive("neg", _neg_fwd, _neg_bwd)


def add(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    return apply_op("add", (a, b))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    return apply_op("sub", (a, b))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    return apply_op("mul", (a, b))


def div(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    return apply_op("div", (a, b))


def neg(a) -> Tensor:
    return apply_op("neg", (_as_tensor(a),))


# --------------------------------------------------------------------------
# Matrix multiplication (batched on leading axes)
# --------------------------------------------------------------------------

def _matmul_fwd(a, b):
    _check_same_dtype("matmul", a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    return a @ b, (a, b)


def _matmul_bwd(ctx, g, needs):
    a, b = ctx
    ga = gb = None
    if needs[0]:
        ga = _unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape)
    if needs[1]:
        gb = _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape)
    return ga, gb


register_primitive("matmul", _matmul_fwd, _matmul_bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return apply_op("matmul", (a, b))


# --------------------------------------------------------------------------
# Activations
# --------------------------------------------------------------------------

def _relu_fwd(x):
    # Subgradient at exactly 0 is 0: the mask is strict.
    mask = x > 0
    return np.where(mask, x, 0), mask


def _relu_bwd(ctx, g, needs):
    return (g * ctx,)


def _sigmoid_fwd(x):
    out = 1.0 / (1.0 + np.exp(-x))
    return out, out


def _sigmoid_bwd(ctx, g, needs):
    s = ctx
    return (g * s * (1.0 - s),)


def _silu_fwd(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return x * s, (x, s)


def _silu_bwd(ctx, g, needs):
    x, s = ctx
    return (g * s * (1.0 + x * (1.0 - s)),)


def _softmax_fwd(x, axis):
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return out, out


def _softmax_bwd(ctx, g, needs, axis):
    s = ctx
    dot = (g * s).sum(axis=axis, keepdims=True)
    return (s * (g - dot),)


register_primitive("relu", _relu_fwd, _relu_bwd)
register_primitive("sigmoid", _sigmoid_fwd, _sigmoid_bwd)
register_primitive("silu", _silu_fwd, _silu_bwd)
register_primitive("softmax", _softmax_fwd, _softmax_bwd)


def relu(x: Tensor) -> Tensor:
    return apply_op("relu", (x,))


def sigmoid(x: Tensor) -> Tensor:
    return apply_op("sigmoid", (x,))


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x), the base activation of the KAN edge functions."""
    return apply_op("silu", (x,))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return apply_op("softmax", (x,), axis=axis)


# --------------------------------------------------------------------------
# Normalization
# --------------------------------------------------------------------------

def _layer_norm_fwd(x, gamma, beta, eps):
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(
            f"layer_norm: scale/shift must have shape ({x.shape[-1]},), "
            f"got {gamma.shape} / {beta.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return gamma * xhat + beta, (xhat, inv, gamma)


def _layer_norm_bwd(ctx, g, needs, eps):
    xhat, inv, gamma = ctx
    dgamma = dbeta = dx = None
    lead = tuple(range(g.ndim - 1))
    if needs[1]:
        dgamma = (g * xhat).sum(axis=lead)
    if needs[2]:
        dbeta = g.sum(axis=lead)
    if needs[0]:
        dxhat = g * gamma
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dgamma, dbeta


register_primitive("layer_norm", _layer_norm_fwd, _layer_norm_bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last (channel) axis of each token."""
    return apply_op("layer_norm", (x, gamma, beta), eps=eps)


def _bn_axes(x):
    if x.ndim == 4:
        return (0, 2, 3), (1, -1, 1, 1)
    if x.ndim == 2:
        return (0,), (1, -1)
    raise ShapeError(f"batch_norm: expected 2-D or 4-D input, got {x.shape}")


def _batch_norm_fwd(x, gamma, beta, running_mean, running_var, training,
                    momentum, eps):
    axes, cshape = _bn_axes(x)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: scale/shift must have shape ({c},)")
    if training:
        mu = x.mean(axis=axes)
        xc = x - mu.reshape(cshape)
        var = np.mean(xc * xc, axis=axes)
        m = x.size // c
        # Running stats use the unbiased variance; normalization the biased one.
        unbiased = var * (m / max(m - 1, 1))
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mu
        running_var *= (1.0 - momentum)
        running_var += momentum * unbiased
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv.reshape(cshape)
        out = gamma.reshape(cshape) * xhat + beta.reshape(cshape)
        return out, (xhat, inv, gamma, True)
    inv = 1.0 / np.sqrt(running_var + eps)
    xhat = (x - running_mean.reshape(cshape)) * inv.reshape(cshape)
    out = gamma.reshape(cshape) * xhat + beta.reshape(cshape)
    return out, (xhat, inv, gamma, False)


def _batch_norm_bwd(ctx, g, needs, running_mean, running_var, training,
                    momentum, eps):
    xhat, inv, gamma, was_training = ctx
    axes, cshape = _bn_axes(g)
    dgamma = (g * xhat).sum(axis=axes) if needs[1] else None
    dbeta = g.sum(axis=axes) if needs[2] else None
    dx = None
    if needs[0]:
        dxhat = g * gamma.reshape(cshape)
        if was_training:
            m = g.size // g.shape[1]
            s1 = dxhat.sum(axis=axes).reshape(cshape)
            s2 = (dxhat * xhat).sum(axis=axes).reshape(cshape)
            dx = inv.reshape(cshape) / m * (m * dxhat - s1 - xhat * s2)
        else:
            dx = dxhat * inv.reshape(cshape)
    return dx, dgamma, dbeta


register_primitive("batch_norm", _batch_norm_fwd, _batch_norm_bwd)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over (B, H, W) or (B,) statistics.

    In training mode the running buffers are updated in place via an
    exponential moving average.
    """
    return apply_op("batch_norm", (x, gamma, beta), running_mean=running_mean,
                    running_var=running_var, training=training,
                    momentum=momentum, eps=eps)


# --------------------------------------------------------------------------
# Convolutions
# --------------------------------------------------------------------------

def _im2col(xp, kh, kw, stride):
    # xp: padded (B, C, Hp, Wp) -> (B*Ho*Wo, C*kh*kw) plus output extents.
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]
    b, c, ho, wo = windows.shape[:4]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)
    return cols, ho, wo


def _conv2d_fwd(x, w, stride, padding):
    _check_same_dtype("conv2d", x, w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and kernel, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, kernel expects {w.shape[1]}")
    kh, kw = w.shape[2], w.shape[3]
    if x.shape[2] + 2 * padding < kh or x.shape[3] + 2 * padding < kw:
        raise ShapeError("conv2d: kernel larger than padded input")
    if padding:
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    out2d = cols @ w.reshape(w.shape[0], -1).T
    out = out2d.reshape(x.shape[0], ho, wo, w.shape[0]).transpose(0, 3, 1, 2)
    return out, (x, w)


def _conv2d_bwd(ctx, g, needs, stride, padding):
    x, w = ctx
    b, co, ho, wo = g.shape
    kh, kw = w.shape[2], w.shape[3]
    g2d = g.transpose(0, 2, 3, 1).reshape(b * ho * wo, co)
    dx = dw = None
    if padding:
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x
    if needs[1]:
        cols, _, _ = _im2col(xp, kh, kw, stride)
        dw = (g2d.T @ cols).reshape(w.shape)
    if needs[0]:
        dcols = g2d @ w.reshape(co, -1)
        dcols = dcols.reshape(b, ho, wo, x.shape[1], kh, kw)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    np.moveaxis(dcols[..., i, j], 3, 1)
        if padding:
            dx = dxp[:, :, padding:-padding, padding:-padding]
        else:
            dx = dxp
    return dx, dw


register_primitive("conv2d", _conv2d_fwd, _conv2d_bwd)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with kernel (C_out, C_in, kh, kw); zero padding."""
    return apply_op("conv2d", (x, w), stride=stride, padding=padding)


def _conv2d_depthwise_fwd(x, w):
    _check_same_dtype("conv2d_depthwise", x, w)
    if x.ndim != 4 or w.ndim != 3:
        raise ShapeError(
            f"conv2d_depthwise: expected (B,C,H,W) input and (C,k,k) kernel, "
            f"got {x.shape}, {w.shape}")
    c, kh, kw = w.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d_depthwise: kernel must be odd and square, got {kh}x{kw}")
    if x.shape[1] != c:
        raise ShapeError(
            f"conv2d_depthwise: input has {x.shape[1]} channels, kernel has {c}")
    p = (kh - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    h, wd = x.shape[2], x.shape[3]
    out = np.zeros_like(x)
    for i in range(kh):
        for j in range(kw):
            out += w[:, i, j].reshape(1, -1, 1, 1) * xp[:, :, i:i + h, j:j + wd]
    return out, (xp, w, x.shape)


def _conv2d_depthwise_bwd(ctx, g, needs):
    xp, w, xshape = ctx
    c, kh, kw = w.shape
    h, wd = xshape[2], xshape[3]
    p = (kh - 1) // 2
    dx = dw = None
    if needs[1]:
        dw = np.empty_like(w)
        for i in range(kh):
            for j in range(kw):
                dw[:, i, j] = np.einsum("bchw,bchw->c", g, xp[:, :, i:i + h, j:j + wd])
    if needs[0]:
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + h, j:j + wd] += w[:, i, j].reshape(1, -1, 1, 1) * g
        dx = dxp[:, :, p:-p, p:-p] if p else dxp
    return dx, dw


register_primitive("conv2d_depthwise", _conv2d_depthwise_fwd, _conv2d_depthwise_bwd)


def conv2d_depthwise(x: Tensor, w: Tensor) -> Tensor:
    """Per-channel convolution with same padding; output channel c sees only input channel c."""
    return apply_op("conv2d_depthwise", (x, w))


def _maxpool2d_fwd(x, k):
    b, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"maxpool2d: extents {h}x{w} not divisible by {k}")
    ho, wo = h // k, w // k
    tiles = x.reshape(b, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, k * k)
    idx = tiles.argmax(axis=-1)
    out = np.take_along_axis(tiles, idx[..., None], axis=-1)[..., 0]
    return out, (idx.astype(np.uint8), x.shape)


def _maxpool2d_bwd(ctx, g, needs, k):
    idx, xshape = ctx
    b, c, h, w = xshape
    ho, wo = h // k, w // k
    dt = np.zeros((b, c, ho, wo, k * k), dtype=g.dtype)
    np.put_along_axis(dt, idx[..., None].astype(np.intp), g[..., None], axis=-1)
    dx = dt.reshape(b, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(xshape)
    return (dx,)


register_primitive("maxpool2d", _maxpool2d_fwd, _maxpool2d_bwd)


def maxpool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k x k max pooling (ties go to the first element)."""
    return apply_op("maxpool2d", (x,), k=k)


# --------------------------------------------------------------------------
# Resampling: separable interpolation matrices, so backward is the transpose.
# --------------------------------------------------------------------------

_INTERP_CACHE: dict[tuple, np.ndarray] = {}


def _interp_matrix(n_in: int, factor: int, mode: str, dtype) -> np.ndarray:
    key = (n_in, factor, mode, np.dtype(dtype).str)
    mat = _INTERP_CACHE.get(key)
    if mat is not None:
        return mat
    n_out = n_in * factor
    m = np.zeros((n_out, n_in), dtype=np.float64)
    if mode == "nearest":
        for o in range(n_out):
            m[o, o // factor] = 1.0
    elif mode == "bilinear":
        # align_corners=False source coordinates
        for o in range(n_out):
            src = (o + 0.5) / factor - 0.5
            i0 = int(np.floor(src))
            frac = src - i0
            m[o, min(max(i0, 0), n_in - 1)] += 1.0 - frac
            m[o, min(max(i0 + 1, 0), n_in - 1)] += frac
    else:
        raise ValueError(f"unknown resize mode {mode!r}")
    mat = m.astype(dtype)
    _INTERP_CACHE[key] = mat
    return mat


def _upsample2d_fwd(x, factor, mode):
    if x.ndim != 4:
        raise ShapeError(f"upsample2d: expected 4-D input, got {x.shape}")
    rh = _interp_matrix(x.shape[2], factor, mode, x.dtype)
    rw = _interp_matrix(x.shape[3], factor, mode, x.dtype)
    out = rh @ x @ rw.T
    return out, (rh, rw)


def _upsample2d_bwd(ctx, g, needs, factor, mode):
    rh, rw = ctx
    return (rh.T @ g @ rw,)


register_primitive("upsample2d", _upsample2d_fwd, _upsample2d_bwd)


def upsample2d(x: Tensor, factor: int = 2, mode: str = "bilinear") -> Tensor:
    """Integer-factor spatial upsampling (bilinear uses align_corners=False)."""
    return apply_op("upsample2d", (x,), factor=factor, mode=mode)


# --------------------------------------------------------------------------
# Shape manipulation
# --------------------------------------------------------------------------

def _reshape_fwd(x, shape):
    try:
        out = x.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    return out, x.shape


def _reshape_bwd(ctx, g, needs, shape):
    return (g.reshape(ctx),)


def _transpose_fwd(x, axes):
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for rank {x.ndim}")
    return np.ascontiguousarray(x.transpose(axes)), None


def _transpose_bwd(ctx, g, needs, axes):
    inverse = np.argsort(axes)
    return (np.ascontiguousarray(g.transpose(inverse)),)


register_primitive("reshape", _reshape_fwd, _reshape_bwd)
register_primitive("transpose", _transpose_fwd, _transpose_bwd)


def reshape(x: Tensor, shape) -> Tensor:
    return apply_op("reshape", (x,), shape=tuple(shape))


def transpose(x: Tensor, axes) -> Tensor:
    return apply_op("transpose", (x,), axes=tuple(axes))


def _reduce_sum_fwd(x, axis, keepdims):
    return x.sum(axis=axis, keepdims=keepdims), x.shape


def _expand_reduced(g, xshape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, xshape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, xshape)


def _reduce_sum_bwd(ctx, g, needs, axis, keepdims):
    return (_expand_reduced(g, ctx, axis, keepdims).copy(),)


def _reduce_mean_fwd(x, axis, keepdims):
    return x.mean(axis=axis, keepdims=keepdims), x.shape


def _reduce_mean_bwd(ctx, g, needs, axis, keepdims):
    xshape = ctx
    if axis is None:
        count = int(np.prod(xshape))
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([xshape[a] for a in axes]))
    return (_expand_reduced(g, xshape, axis, keepdims) / count,)


register_primitive("reduce_sum", _reduce_sum_fwd, _reduce_sum_bwd)
register_primitive("reduce_mean", _reduce_mean_fwd, _reduce_mean_bwd)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return apply_op("reduce_sum", (x,), axis=axis, keepdims=keepdims)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return apply_op("reduce_mean", (x,), axis=axis, keepdims=keepdims)


def _pad2d_fwd(x, pads):
    t, b, l, r = pads
    out = np.pad(x, ((0, 0), (0, 0), (t, b), (l, r)))
    return out, x.shape


def _pad2d_bwd(ctx, g, needs, pads):
    t, _, l, _ = pads
    h, w = ctx[2], ctx[3]
    return (g[:, :, t:t + h, l:l + w],)


def _crop2d_fwd(x, h, w):
    if h > x.shape[2] or w > x.shape[3]:
        raise ShapeError(f"crop2d: target {h}x{w} exceeds input {x.shape}")
    return np.ascontiguousarray(x[:, :, :h, :w]), x.shape


def _crop2d_bwd(ctx, g, needs, h, w):
    dx = np.zeros(ctx, dtype=g.dtype)
    dx[:, :, :h, :w] = g
    return (dx,)


register_primitive("pad2d", _pad2d_fwd, _pad2d_bwd)
register_primitive("crop2d", _crop2d_fwd, _crop2d_bwd)


def pad2d(x: Tensor, pads: Sequence[int]) -> Tensor:
    """Zero-pad the two trailing axes by (top, bottom, left, right)."""
    return apply_op("pad2d", (x,), pads=tuple(pads))


def crop2d(x: Tensor, h: int, w: int) -> Tensor:
    """Keep the top-left h x w region of the two trailing axes."""
    return apply_op("crop2d", (x,), h=h, w=w)


# --------------------------------------------------------------------------
# Window gather for windowed attention
# --------------------------------------------------------------------------

def _window_partition_fwd(x, win):
    b, c, h, w = x.shape
    if h % win or w % win:
        raise ShapeError(f"window_partition: extents {h}x{w} not divisible by window {win}")
    nh, nw = h // win, w // win
    out = (x.reshape(b, c, nh, win, nw, win)
            .transpose(0, 2, 4, 3, 5, 1)
            .reshape(b * nh * nw, win * win, c))
    return np.ascontiguousarray(out), (b, c, h, w)


def _window_partition_bwd(ctx, g, needs, win):
    b, c, h, w = ctx
    nh, nw = h // win, w // win
    dx = (g.reshape(b, nh, nw, win, win, c)
           .transpose(0, 5, 1, 3, 2, 4)
           .reshape(b, c, h, w))
    return (np.ascontiguousarray(dx),)


def _window_merge_fwd(x, win, h, w):
    nh, nw = h // win, w // win
    if x.ndim != 3 or x.shape[1] != win * win or x.shape[0] % (nh * nw):
        raise ShapeError(f"window_merge: {x.shape} incompatible with window {win} over {h}x{w}")
    b = x.shape[0] // (nh * nw)
    c = x.shape[2]
    out = (x.reshape(b, nh, nw, win, win, c)
            .transpose(0, 5, 1, 3, 2, 4)
            .reshape(b, c, h, w))
    return np.ascontiguousarray(out), (b, c)


def _window_merge_bwd(ctx, g, needs, win, h, w):
    b, c = ctx
    nh, nw = h // win, w // win
    dx = (g.reshape(b, c, nh, win, nw, win)
           .transpose(0, 2, 4, 3, 5, 1)
           .reshape(b * nh * nw, win * win, c))
    return (np.ascontiguousarray(dx),)


register_primitive("window_partition", _window_partition_fwd, _window_partition_bwd)
register_primitive("window_merge", _window_merge_fwd, _window_merge_bwd)


def window_partition(x: Tensor, win: int) -> Tensor:
    """(B, C, H, W) -> (B*nWindows, win*win, C) with row-major token order."""
    return apply_op("window_partition", (x,), win=win)


def window_merge(x: Tensor, win: int, h: int, w: int) -> Tensor:
    """Inverse of :func:`window_partition`."""
    return apply_op("window_merge", (x,), win=win, h=h, w=w)


# --------------------------------------------------------------------------
# Fused softmax cross-entropy over class maps
# --------------------------------------------------------------------------

def _cross_entropy_fwd(logits, target, ignore_index):
    if logits.ndim != 4:
        raise ShapeError(f"cross_entropy: expected (B,C,H,W) logits, got {logits.shape}")
    b, c, h, w = logits.shape
    if target.shape != (b, h, w):
        raise ShapeError(
            f"cross_entropy: target shape {target.shape} does not match logits {logits.shape}")
    valid = target != ignore_index
    n = int(valid.sum())
    if n == 0:
        raise AutodiffError("cross_entropy: every pixel is ignored, mean undefined")
    tgt = np.where(valid, target, 0)
    if tgt.min() < 0 or tgt.max() >= c:
        raise ShapeError("cross_entropy: target class out of range")
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    denom = e.sum(axis=1, keepdims=True)
    probs = e / denom
    logp = shifted - np.log(denom)
    bi, hi, wi = _pixel_grids(b, h, w)
    picked = logp[bi, tgt, hi, wi]
    # Accumulate in float64: the sum runs over up to millions of pixels.
    loss = -(picked * valid).sum(dtype=np.float64) / n
    return np.asarray(loss, dtype=logits.dtype), (probs, tgt, valid, n)


def _pixel_grids(b, h, w):
    return (np.arange(b)[:, None, None], np.arange(h)[None, :, None],
            np.arange(w)[None, None, :])


def _cross_entropy_bwd(ctx, g, needs, target, ignore_index):
    probs, tgt, valid, n = ctx
    b, c, h, w = probs.shape
    dlogits = probs.copy()
    bi, hi, wi = _pixel_grids(b, h, w)
    dlogits[bi, tgt, hi, wi] -= 1.0
    dlogits *= valid[:, None, :, :]
    dlogits *= g / n
    return (dlogits,)


register_primitive("cross_entropy", _cross_entropy_fwd, _cross_entropy_bwd)


def cross_entropy(logits: Tensor, target: np.ndarray, ignore_index: int = 255) -> Tensor:
    """Mean of -log softmax(logits)[target] over pixels not labeled ignore_index."""
    return apply_op("cross_entropy", (logits,), target=np.asarray(target),
                    ignore_index=ignore_index)
