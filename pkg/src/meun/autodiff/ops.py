"""Differentiable primitives over rank-4 (n, c, h, w) tensors.

Only the operations the network needs are provided; there is no general
broadcasting. Each function validates shapes, computes the forward value with
numpy and records a backward rule on the active tape.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from meun.autodiff.tensor import Tensor, record
from meun.errors import (
    DegenerateBatchError,
    EmptyInputError,
    RankError,
    ShapeError,
    UnsupportedKernelError,
)

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


def _check_rank(x: Tensor, rank: int, what: str) -> None:
    if x.ndim != rank:
        raise RankError(f"{what} expects rank {rank}, got shape {x.shape}")


# -- convolution -------------------------------------------------------------


def _im2col(xp: np.ndarray, k: int, dilation: int, h: int, w: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, h, w), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i * dilation : i * dilation + h, j * dilation : j * dilation + w]
    return cols.reshape(n, c * k * k, h * w)


def _conv2d_backward(g, x_shape, cols, w2, k, dilation, has_bias):
    """Gradients of a stride-1 'same' convolution w.r.t. input, weight and bias."""
    n, c, h, w = x_shape
    cout = w2.shape[0]
    g2 = g.reshape(n, cout, h * w)
    gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(cout, c, k, k)
    gb = g2.sum(axis=(0, 2)) if has_bias else None
    gcols = np.matmul(w2.T, g2)
    if k == 1:
        return gcols.reshape(n, c, h, w), gw, gb
    pad = dilation * (k - 1) // 2
    gcols = gcols.reshape(n, c, k, k, h, w)
    gxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            gxp[:, :, i * dilation : i * dilation + h, j * dilation : j * dilation + w] += gcols[:, :, i, j]
    return gxp[:, :, pad : pad + h, pad : pad + w], gw, gb


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, dilation: int = 1) -> Tensor:
    """Stride-1 cross-correlation with zero padding that preserves spatial size."""
    _check_rank(x, 4, "conv2d input")
    _check_rank(weight, 4, "conv2d weight")
    cout, cin, kh, kw = weight.shape
    if kh != kw or kh % 2 == 0:
        raise UnsupportedKernelError(f"only odd square kernels are supported, got {kh}x{kw}")
    if dilation < 1:
        raise ValueError(f"dilation must be positive, got {dilation}")
    n, c, h, w = x.shape
    if c != cin:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, weight expects {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {bias.shape} != ({cout},)")
    k = kh
    w2 = weight.data.reshape(cout, cin * k * k)
    if k == 1:
        cols = x.data.reshape(n, c, h * w)
    else:
        pad = dilation * (k - 1) // 2
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        cols = _im2col(xp, k, dilation, h, w)
    out = np.matmul(w2, cols).reshape(n, cout, h, w)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def back(g):
        gx, gw, gb = _conv2d_backward(g, x.shape, cols, w2, k, dilation, bias is not None)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return record(out, inputs, back)


# -- pooling and resampling --------------------------------------------------


def maxpool2(x: Tensor, ceil_mode: bool = True) -> Tensor:
    """2x2 max pooling with stride 2; ties resolve to the first window element."""
    _check_rank(x, 4, "maxpool2 input")
    n, c, h, w = x.shape
    if h == 0 or w == 0:
        raise EmptyInputError("maxpool2 on empty spatial input")
    if ceil_mode:
        oh, ow = -(-h // 2), -(-w // 2)
        xp = np.full((n, c, 2 * oh, 2 * ow), -np.inf, dtype=x.dtype)
        xp[:, :, :h, :w] = x.data
    else:
        oh, ow = h // 2, w // 2
        if oh == 0 or ow == 0:
            raise EmptyInputError("maxpool2 floor mode produces an empty output")
        xp = x.data[:, :, : 2 * oh, : 2 * ow]
    win = xp.reshape(n, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gwin = np.zeros((n, c, oh, ow, 4), dtype=g.dtype)
        np.put_along_axis(gwin, arg[..., None], g[..., None], axis=-1)
        gxp = gwin.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * oh, 2 * ow)
        return (np.ascontiguousarray(gxp[:, :, :h, :w]),)

    return record(out, (x,), back)


def interp_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """(n_out, n_in) linear-interpolation weights, half-pixel centres, edge-clamped."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[i, i0] += 1.0 - lam
        m[i, i1] += lam
    return m


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    _check_rank(x, 4, "upsample_bilinear input")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"output size must be positive, got {out_h}x{out_w}")
    n, c, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return record(x.data.copy(), (x,), lambda g: (g,))
    ah = interp_matrix(h, out_h, x.dtype)
    aw = interp_matrix(w, out_w, x.dtype)
    out = np.matmul(np.matmul(ah, x.data), aw.T)

    def back(g):
        return (np.matmul(np.matmul(ah.T, g), aw),)

    return record(out, (x,), back)


# -- normalization -----------------------------------------------------------


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel batch normalization.

    In training mode the batch statistics are used and ``running_mean`` and
    ``running_var`` are updated in place (the latter with the unbiased
    variance). In eval mode the running statistics are used.
    """
    _check_rank(x, 4, "batchnorm2d input")
    if eps <= 0:
        raise ValueError("eps must be positive")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d affine shapes {gamma.shape}, {beta.shape} do not match {c} channels")
    gm = gamma.data[None, :, None, None]
    if training:
        m = n * h * w
        if m <= 1:
            raise DegenerateBatchError("batch statistics need more than one value per channel")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / (m - 1))
        out = gm * xhat + beta.data[None, :, None, None]

        def back(g):
            gg = (g * xhat).sum(axis=(0, 2, 3))
            gb = g.sum(axis=(0, 2, 3))
            dxhat = g * gm
            gx = (inv / m)[None, :, None, None] * (
                m * dxhat
                - dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
            )
            return gx, gg, gb

    else:
        inv = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype)
        xhat = (x.data - running_mean.astype(x.dtype)[None, :, None, None]) * inv[None, :, None, None]
        out = gm * xhat + beta.data[None, :, None, None]

        def back(g):
            return (
                g * (gm * inv[None, :, None, None]),
                (g * xhat).sum(axis=(0, 2, 3)),
                g.sum(axis=(0, 2, 3)),
            )

    return record(out.astype(x.dtype, copy=False), (x, gamma, beta), back)


# -- pointwise and small primitives ------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return record(s, (x,), lambda g: (g * s * (1.0 - s),))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return record(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    return record(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return record(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, g, dtype=x.dtype),))


def weighted_sum(terms: Sequence[Tensor], weights: Sequence[float]) -> Tensor:
    """Scalar sum of ``weights[i] * terms[i]`` evaluated in double precision."""
    if len(terms) != len(weights):
        raise ShapeError("weighted_sum needs one weight per term")
    for t in terms:
        if t.size != 1:
            raise RankError(f"weighted_sum terms must be scalars, got shape {t.shape}")
    total = 0.0
    for t, wt in zip(terms, weights):
        total += float(wt) * float(t.data.reshape(()))
    w = [float(v) for v in weights]

    def back(g):
        return tuple(np.asarray(g * wt).reshape(t.shape) for t, wt in zip(terms, w))

    return record(np.asarray(total, dtype=np.float64), tuple(terms), back)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ShapeError("concat_channels needs at least one input")
    for t in xs:
        _check_rank(t, 4, "concat_channels input")
    n, _, h, w = xs[0].shape
    for t in xs[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ShapeError(f"concat_channels shape mismatch: {xs[0].shape} vs {t.shape}")
    splits = np.cumsum([t.shape[1] for t in xs])[:-1]
    out = np.concatenate([t.data for t in xs], axis=1)
    return record(out, tuple(xs), lambda g: tuple(np.split(g, splits, axis=1)))


def channel_scale(x: Tensor, v: Tensor) -> Tensor:
    """Multiply each channel of ``x`` by the matching entry of ``v``.

    ``v`` is either one vector of length c shared by the batch or an (n, c)
    matrix with one vector per sample.
    """
    _check_rank(x, 4, "channel_scale input")
    n, c = x.shape[:2]
    if v.shape == (c,):
        vb = v.data[None, :, None, None]
        reduce_axes = (0, 2, 3)
    elif v.shape == (n, c):
        vb = v.data[:, :, None, None]
        reduce_axes = (2, 3)
    else:
        raise ShapeError(f"channel_scale vector shape {v.shape} does not match {c} channels")
    out = x.data * vb

    def back(g):
        return g * vb, (g * x.data).sum(axis=reduce_axes)

    return record(out, (x, v), back)


def global_avg_pool(x: Tensor) -> Tensor:
    """(n, c, h, w) -> (n, c) spatial mean."""
    _check_rank(x, 4, "global_avg_pool input")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))
    return record(out, (x,), lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """(n, i) @ (o, i)^T + b -> (n, o)."""
    _check_rank(x, 2, "linear input")
    o, i = weight.shape
    if x.shape[1] != i:
        raise ShapeError(f"linear input has {x.shape[1]} features, weight expects {i}")
    out = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (o,):
            raise ShapeError(f"linear bias shape {bias.shape} != ({o},)")
        out = out + bias.data

    def back(g):
        gx = g @ weight.data
        gw = g.T @ x.data
        return (gx, gw, g.sum(axis=0)) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return record(out, inputs, back)
