"""Differentiable ops.

Layout is ``N x C x H x W`` for batched maps and ``C x H x W`` for single
images; channel-wise ops take the channel axis explicitly or infer it from
rank. Broadcasting is only allowed along the leading batch axis.
"""
from __future__ import annotations

import numpy as np

from . import kernels
from .autograd import ShapeError, Tensor, as_tensor

__all__ = [
    "add",
    "batch_take",
    "concat_channels",
    "conv2d",
    "log_softmax",
    "mean",
    "mul",
    "relu",
    "reshape",
    "resize_nearest",
    "scale",
    "sigmoid",
    "pointwise_activation",
    "soft_cross_entropy_sum",
    "softmax",
    "sum",
]


def _channel_axis(x: np.ndarray) -> int:
    return 1 if x.ndim == 4 else 0


# ---------------------------------------------------------------- linear ops

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.dims != b.dims:
        raise ShapeError("add", "all", a.dims, b.dims)
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._from_op(x.data * c, (x,), lambda g: (g * c,), "scale")


def sum(x: Tensor) -> Tensor:  # noqa: A001
    shape = x.dims
    out = np.asarray(x.data.sum(), dtype=x.dtype).reshape(())
    return Tensor._from_op(out, (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(x: Tensor) -> Tensor:
    return scale(sum(x), 1.0 / x.data.size)


def reshape(x: Tensor, dims) -> Tensor:
    old = x.dims
    return Tensor._from_op(x.data.reshape(dims), (x,), lambda g: (g.reshape(old),), "reshape")


def batch_take(x: Tensor, idx) -> Tensor:
    """Select rows along the batch axis."""
    idx = np.asarray(idx, dtype=np.intp)
    shape = x.dims

    def vjp(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor._from_op(x.data[idx], (x,), vjp, "batch_take")


def _batch_broadcast_check(op: str, a: Tensor, b: Tensor) -> bool:
    """True when b broadcasts along the batch axis of a."""
    if a.dims == b.dims:
        return False
    if a.ndim == b.ndim and a.ndim >= 1 and b.dims[0] == 1 and a.dims[1:] == b.dims[1:]:
        return True
    for k, (da, db) in enumerate(zip(a.dims, b.dims)):
        if da != db:
            raise ShapeError(op, f"dim{k}", da, db)
    raise ShapeError(op, "rank", a.ndim, b.ndim)


def mul(a, b) -> Tensor:
    """Hadamard product; ``b`` may have size 1 on the batch axis."""
    a, b = as_tensor(a), as_tensor(b)
    bcast = _batch_broadcast_check("mul", a, b)
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g * bd
        gb = g * ad
        if bcast:
            gb = gb.sum(axis=0, keepdims=True)
        return ga, gb

    return Tensor._from_op(ad * bd, (a, b), vjp, "mul")


# --------------------------------------------------------------- activations

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(v.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return Tensor._from_op(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def pointwise_activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def softmax_array(v: np.ndarray, axis: int) -> np.ndarray:
    z = v - v.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax_array(v: np.ndarray, axis: int) -> np.ndarray:
    z = v - v.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax(x: Tensor, axis: int | None = None) -> Tensor:
    ax = _channel_axis(x.data) if axis is None else axis
    s = softmax_array(x.data, ax)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=ax, keepdims=True)),)

    return Tensor._from_op(s, (x,), vjp, "softmax")


def log_softmax(x: Tensor, axis: int | None = None) -> Tensor:
    ax = _channel_axis(x.data) if axis is None else axis
    ls = log_softmax_array(x.data, ax)

    def vjp(g):
        return (g - np.exp(ls) * g.sum(axis=ax, keepdims=True),)

    return Tensor._from_op(ls, (x,), vjp, "log_softmax")


def soft_cross_entropy_sum(q, logits: Tensor, axis: int | None = None) -> Tensor:
    """``-sum(q * log_softmax(logits))`` with ``q`` held constant.

    Fused so the gradient is the well-conditioned ``softmax * sum(q) - q``.
    """
    q = q.data if isinstance(q, Tensor) else np.asarray(q)
    if q.shape != logits.dims:
        raise ShapeError("soft_cross_entropy", "all", logits.dims, q.shape)
    ax = _channel_axis(logits.data) if axis is None else axis
    ls = log_softmax_array(logits.data, ax)
    q = q.astype(ls.dtype, copy=False)
    # 0 * log(p) is 0 even when log(p) underflows to -inf
    out = np.asarray(-np.where(q > 0, q * ls, 0.0).sum(), dtype=ls.dtype)

    def vjp(g):
        return (g * (np.exp(ls) * q.sum(axis=ax, keepdims=True) - q),)

    return Tensor._from_op(out, (logits,), vjp, "soft_cross_entropy")


# ------------------------------------------------------------ spatial ops

def conv2d(x: Tensor, k: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (C_in x H x W, optionally batched) with ``k``."""
    x, k = as_tensor(x), as_tensor(k)
    unbatched = x.ndim == 3
    if x.ndim not in (3, 4):
        raise ShapeError("conv2d", "rank", "3 or 4", x.ndim)
    if k.ndim != 4:
        raise ShapeError("conv2d", "kernel rank", 4, k.ndim)
    xd = x.data[None] if unbatched else x.data
    n, c, h, w = xd.shape
    cout, cin, kh, kw = k.dims
    if cin != c:
        raise ShapeError("conv2d", "C_in", cin, c)
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d: need stride >= 1 and pad >= 0, got {stride}, {pad}")
    # output size is floored, as in common frameworks
    if h + 2 * pad < kh:
        raise ShapeError("conv2d", "H", f">= {kh - 2 * pad}", h)
    if w + 2 * pad < kw:
        raise ShapeError("conv2d", "W", f">= {kw - 2 * pad}", w)
    if bias is not None and bias.dims != (cout,):
        raise ShapeError("conv2d", "bias", (cout,), bias.dims)
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1

    xd = np.ascontiguousarray(xd)
    cols = kernels.im2col(xd, kh, kw, stride, pad)  # (cin*kh*kw, n*ho*wo)
    wmat = k.data.reshape(cout, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out[0] if unbatched else out)

    def vjp(g):
        gm = np.ascontiguousarray((g[None] if unbatched else g).transpose(1, 0, 2, 3)).reshape(cout, -1)
        gx = None
        if x.requires_grad:
            gcols = wmat.T @ gm
            gx = kernels.col2im(np.ascontiguousarray(gcols), n, c, h, w, kh, kw, stride, pad)
            if unbatched:
                gx = gx[0]
        gk = (gm @ cols.T).reshape(k.dims) if k.requires_grad else None
        gb = gm.sum(axis=1) if bias is not None and bias.requires_grad else None
        return gx, gk, gb

    parents = (x, k) if bias is None else (x, k, bias)
    return Tensor._from_op(out, parents, vjp, "conv2d")


def _nearest_index(src: int, dst: int) -> np.ndarray:
    return (np.arange(dst) * src) // dst


def resize_nearest(x: Tensor, target) -> Tensor:
    """Nearest-neighbour resize of the last two axes; row i samples floor(i*H/H')."""
    x = as_tensor(x)
    th, tw = int(target[0]), int(target[1])
    if th < 1 or tw < 1:
        raise ValueError(f"resize_nearest: target must be >= 1, got {target}")
    h, w = x.dims[-2], x.dims[-1]
    if (th, tw) == (h, w):
        return Tensor._from_op(x.data.copy(), (x,), lambda g: (g,), "resize_nearest")
    ri = _nearest_index(h, th)
    ci = _nearest_index(w, tw)
    out = x.data[..., ri, :][..., ci]
    # selection matrices make the adjoint a pair of matmuls instead of np.add.at
    rsel = np.zeros((th, h), dtype=x.dtype)
    rsel[np.arange(th), ri] = 1
    csel = np.zeros((tw, w), dtype=x.dtype)
    csel[np.arange(tw), ci] = 1

    def vjp(g):
        return (np.matmul(rsel.T, g @ csel),)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), vjp, "resize_nearest")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != b.ndim:
        raise ShapeError("concat_channels", "rank", a.ndim, b.ndim)
    ax = _channel_axis(a.data)
    if a.dims[-2:] != b.dims[-2:]:
        axis = "H" if a.dims[-2] != b.dims[-2] else "W"
        raise ShapeError("concat_channels", axis, a.dims[-2:], b.dims[-2:])
    if ax == 1 and a.dims[0] != b.dims[0]:
        raise ShapeError("concat_channels", "N", a.dims[0], b.dims[0])
    ca = a.dims[ax]
    out = np.concatenate([a.data, b.data], axis=ax)

    def vjp(g):
        ga, gb = np.split(g, [ca], axis=ax)
        return ga, gb

    return Tensor._from_op(out, (a, b), vjp, "concat_channels")
