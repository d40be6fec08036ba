"""Differentiable primitives over :class:`Tensor`.

Every op returns a new tensor and registers a closure mapping the output
gradient to one gradient per parent (``None`` where no grad is needed).
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError
from .tensor import Tensor, check_finite, make_result


def _need4(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{op} expects an NCHW tensor, got shape {x.shape}")


# -- convolution -------------------------------------------------------------


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding (the usual CNN "conv")."""
    _need4(x, "conv2d")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d weight must be (F,C,k,k), got {weight.shape}")
    n, c, h, w = x.shape
    f, wc, k, _ = weight.shape
    if wc != c:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {wc}")
    if bias is not None and bias.shape != (f,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({f},)")
    if stride < 1 or padding < 0:
        raise ShapeError("conv2d: stride must be >= 1 and padding >= 0")
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {k} does not fit input {h}x{w} with padding {padding}")

    # Channels-last, one matmul per kernel tap: out[:, y, x] += xpad[:, y*s+i, x*s+j] @ W[:, :, i, j].T
    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    xh = np.ascontiguousarray(xd.transpose(0, 2, 3, 1))
    wt = np.ascontiguousarray(weight.data.transpose(2, 3, 1, 0))  # (k, k, C, F)
    ys, xs = stride * ho, stride * wo

    def tap(a: np.ndarray, i: int, j: int) -> np.ndarray:
        return a[:, i : i + ys : stride, j : j + xs : stride, :]

    acc = np.zeros((n, ho, wo, f), dtype=np.result_type(xh, wt))
    for i in range(k):
        for j in range(k):
            acc += tap(xh, i, j) @ wt[i, j]
    if bias is not None:
        acc += bias.data
    out = np.ascontiguousarray(acc.transpose(0, 3, 1, 2))
    check_finite(out, "conv2d")

    def grad_fn(g: np.ndarray):
        gh = np.ascontiguousarray(g.transpose(0, 2, 3, 1))
        gw = gx = None
        gb = gh.sum(axis=(0, 1, 2)) if bias is not None and bias.requires_grad else None
        if weight.requires_grad:
            gwt = np.empty_like(wt)
            for i in range(k):
                for j in range(k):
                    gwt[i, j] = np.tensordot(tap(xh, i, j), gh, axes=([0, 1, 2], [0, 1, 2]))
            gw = gwt.transpose(3, 2, 0, 1)
        if x.requires_grad:
            gxp = np.zeros_like(xh)
            for i in range(k):
                for j in range(k):
                    tap(gxp, i, j)[...] += gh @ wt[i, j].T
            gx = gxp[:, padding : padding + h, padding : padding + w, :].transpose(0, 3, 1, 2)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, grad_fn, "conv2d")


# -- rearrangements ----------------------------------------------------------


def _shuffle(a: np.ndarray, r: int) -> np.ndarray:
    n, cr2, h, w = a.shape
    c = cr2 // (r * r)
    return a.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * r, w * r)


def _unshuffle(a: np.ndarray, r: int) -> np.ndarray:
    n, c, hr, wr = a.shape
    h, w = hr // r, wr // r
    return a.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, h, w)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """(N, C*r*r, H, W) -> (N, C, r*H, r*W); out[n,c,r*h+a,r*w+b] = x[n,c*r*r+a*r+b,h,w]."""
    _need4(x, "pixel_shuffle")
    if r < 1 or x.shape[1] % (r * r):
        raise ShapeError(f"pixel_shuffle: {x.shape[1]} channels not divisible by r^2={r * r}")
    out = np.ascontiguousarray(_shuffle(x.data, r))
    return make_result(out, (x,), lambda g: (_unshuffle(g, r),), "pixel_shuffle")


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Exact inverse of :func:`pixel_shuffle`."""
    _need4(x, "pixel_unshuffle")
    if r < 1 or x.shape[2] % r or x.shape[3] % r:
        raise ShapeError(f"pixel_unshuffle: spatial dims {x.shape[2:]} not divisible by {r}")
    out = np.ascontiguousarray(_unshuffle(x.data, r))
    return make_result(out, (x,), lambda g: (_shuffle(g, r),), "pixel_unshuffle")


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ShapeError("concat_channels: nothing to concatenate")
    for t in xs:
        _need4(t, "concat_channels")
        if t.shape[0] != xs[0].shape[0] or t.shape[2:] != xs[0].shape[2:]:
            raise ShapeError(f"concat_channels: {t.shape} incompatible with {xs[0].shape}")
    out = np.concatenate([t.data for t in xs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def grad_fn(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(xs)))

    return make_result(out, xs, grad_fn, "concat_channels")


# -- activations -------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype)
    return make_result(out, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, kept strictly inside (0, 1) even where it saturates."""
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    info = np.finfo(x.dtype)
    np.clip(out, info.tiny, 1.0 - info.epsneg, out=out)
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


# -- pooling -----------------------------------------------------------------


def global_avg_pool(x: Tensor) -> Tensor:
    _need4(x, "global_avg_pool")
    n, c, h, w = x.shape
    if h * w == 0:
        raise ShapeError("global_avg_pool: empty spatial extent")
    out = x.data.mean(axis=(2, 3), keepdims=True)
    return make_result(
        out, (x,), lambda g: (np.broadcast_to(g / (h * w), x.shape).astype(x.dtype),), "global_avg_pool"
    )


def global_max_pool(x: Tensor) -> Tensor:
    _need4(x, "global_max_pool")
    n, c, h, w = x.shape
    if h * w == 0:
        raise ShapeError("global_max_pool: empty spatial extent")
    flat = x.data.reshape(n, c, h * w)
    idx = flat.argmax(axis=2)  # first occurrence in row-major order
    out = np.take_along_axis(flat, idx[..., None], axis=2).reshape(n, c, 1, 1)

    def grad_fn(g):
        gx = np.zeros((n, c, h * w), dtype=g.dtype)
        np.put_along_axis(gx, idx[..., None], g.reshape(n, c, 1), axis=2)
        return (gx.reshape(x.shape),)

    return make_result(out, (x,), grad_fn, "global_max_pool")


def channel_avg_pool(x: Tensor) -> Tensor:
    _need4(x, "channel_avg_pool")
    c = x.shape[1]
    if c == 0:
        raise ShapeError("channel_avg_pool: no channels")
    out = x.data.mean(axis=1, keepdims=True)
    return make_result(
        out, (x,), lambda g: (np.broadcast_to(g / c, x.shape).astype(x.dtype),), "channel_avg_pool"
    )


def channel_max_pool(x: Tensor) -> Tensor:
    _need4(x, "channel_max_pool")
    if x.shape[1] == 0:
        raise ShapeError("channel_max_pool: no channels")
    idx = x.data.argmax(axis=1)[:, None]
    out = np.take_along_axis(x.data, idx, axis=1)

    def grad_fn(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        np.put_along_axis(gx, idx, g, axis=1)
        return (gx,)

    return make_result(out, (x,), grad_fn, "channel_max_pool")


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping size x size max pooling; trailing rows/cols are dropped."""
    _need4(x, "max_pool2d")
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho == 0 or wo == 0:
        raise ShapeError(f"max_pool2d: input {h}x{w} smaller than window {size}")
    crop = x.data[:, :, : ho * size, : wo * size]
    blocks = crop.reshape(n, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, size * size)
    idx = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def grad_fn(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx, g[..., None], axis=-1)
        gb = gb.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * size, wo * size)
        if (ho * size, wo * size) == (h, w):
            return (gb,)
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, :, : ho * size, : wo * size] = gb
        return (gx,)

    return make_result(out, (x,), grad_fn, "max_pool2d")


# -- elementwise -------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "add")
    out = a.data + b.data
    return make_result(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "sub")
    out = a.data - b.data
    return make_result(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "mul")
    out = a.data * b.data

    def grad_fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), grad_fn, "mul")


def broadcast_mul(x: Tensor, gate: Tensor) -> Tensor:
    """Scale a feature map by a channel map (N,C,1,1) or a spatial map (N,1,H,W)."""
    _need4(x, "broadcast_mul")
    _need4(gate, "broadcast_mul")
    n, c, h, w = x.shape
    if gate.shape not in ((n, c, 1, 1), (n, 1, h, w)):
        raise ShapeError(f"broadcast_mul: gate {gate.shape} is neither (N,C,1,1) nor (N,1,H,W) for {x.shape}")
    return mul(x, gate)


def scalar_mul(x: Tensor, s: float) -> Tensor:
    out = x.data * s
    return make_result(out, (x,), lambda g: (g * s,), "scalar_mul")


def abs_(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return make_result(np.abs(x.data), (x,), lambda g: (g * sign,), "abs")


def square(x: Tensor) -> Tensor:
    return make_result(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def mean_all(x: Tensor) -> Tensor:
    if x.data.size == 0:
        raise ShapeError("mean_all: empty tensor")
    out = np.asarray(x.data.mean(dtype=x.dtype))
    size = x.data.size
    return make_result(out, (x,), lambda g: (np.full(x.shape, g / size, dtype=x.dtype),), "mean_all")


__all__ = [
    "abs_",
    "add",
    "broadcast_mul",
    "channel_avg_pool",
    "channel_max_pool",
    "concat_channels",
    "conv2d",
    "conv_output_size",
    "global_avg_pool",
    "global_max_pool",
    "max_pool2d",
    "mean_all",
    "mul",
    "pixel_shuffle",
    "pixel_unshuffle",
    "relu",
    "scalar_mul",
    "sigmoid",
    "square",
    "sub",
]
