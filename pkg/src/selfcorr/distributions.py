"""Factorial categorical label distributions over pixels.

Logit maps and probability maps are ``(C+1) x H x W`` (or batched with a
leading ``N``); the class axis is always ``-3``. Distributions travel as
logits and are only turned into probabilities where a consumer needs them.
"""
from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor, ops
from .tensor.ops import log_softmax_array, softmax_array

CLASS_AXIS = -3


def _array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=float)


def make_factorial(logits) -> np.ndarray:
    """Per-pixel softmax of a logit map."""
    return softmax_array(_array(logits), CLASS_AXIS)


def one_hot(labels: np.ndarray, num_channels: int, dtype=np.float64) -> np.ndarray:
    """``H x W`` (or ``N x H x W``) class indices to a one-hot ``(C+1)`` map."""
    labels = np.asarray(labels)
    eye = np.eye(num_channels, dtype=dtype)
    return np.moveaxis(eye[labels], -1, CLASS_AXIS)


def entropy(q) -> float:
    q = _array(q)
    return float(-np.where(q > 0, q * np.log(np.where(q > 0, q, 1.0)), 0.0).sum())


def kl_divergence(q, p) -> float:
    """Sum over pixels and classes of ``q log(q/p)``, with ``0 log 0 = 0``.

    Returns ``math.inf`` when ``p`` is zero somewhere ``q`` is positive.
    """
    q, p = _array(q), _array(p)
    if q.shape != p.shape:
        raise ValueError(f"kl_divergence: dims {q.shape} vs {p.shape}")
    support = q > 0
    if np.any(support & (p <= 0)):
        return math.inf
    ratio = np.where(support, q / np.where(support, p, 1.0), 1.0)
    return float(np.where(support, q * np.log(ratio), 0.0).sum())


def fusion_objective(q, p, p_anc, alpha: float) -> float:
    """``KL(q||p) + alpha * KL(q||p_anc)``, the quantity linear fusion minimizes."""
    return kl_divergence(q, p) + alpha * kl_divergence(q, p_anc)


def fuse_linear(logits, anc_logits, alpha: float):
    """Logits of the alpha-weighted geometric mean of two factorial distributions.

    Returns ``(l + alpha * l_anc) / (alpha + 1)``. Its softmax is the unique
    minimizer of :func:`fusion_objective`. ``alpha = inf`` returns the
    ancillary logits. Works on arrays, or on Tensors (differentiably).
    """
    alpha = float(alpha)
    if not alpha >= 0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    if isinstance(logits, Tensor) or isinstance(anc_logits, Tensor):
        logits, anc_logits = ops.as_tensor(logits), ops.as_tensor(anc_logits)
        if logits.dims != anc_logits.dims:
            raise ops.ShapeError("fuse_linear", "all", logits.dims, anc_logits.dims)
        if math.isinf(alpha):
            return ops.scale(anc_logits, 1.0)
        return ops.scale(ops.add(logits, ops.scale(anc_logits, alpha)), 1.0 / (alpha + 1.0))
    l, la = np.asarray(logits), np.asarray(anc_logits)
    if l.shape != la.shape:
        raise ValueError(f"fuse_linear: dims {l.shape} vs {la.shape}")
    if math.isinf(alpha):
        return la.copy()
    return (l + alpha * la) / (alpha + 1.0)


def soft_cross_entropy(q, logits: Tensor) -> Tensor:
    """``-sum q * log softmax(logits)`` over pixels and classes.

    ``q`` is treated as a constant: if it is a Tensor only its values are
    read, so no gradient ever reaches whatever produced it.
    """
    return ops.soft_cross_entropy_sum(_array(q), ops.as_tensor(logits))


def log_prob(logits: Tensor, y_onehot) -> Tensor:
    """Log-likelihood of a one-hot mask under the factorial softmax of ``logits``."""
    return ops.scale(soft_cross_entropy(y_onehot, logits), -1.0)


def log_prob_array(logits, labels: np.ndarray) -> float:
    """Same as :func:`log_prob` for an index mask, without building a graph."""
    ls = log_softmax_array(_array(logits), CLASS_AXIS)
    picked = np.take_along_axis(ls, np.expand_dims(labels, CLASS_AXIS), axis=CLASS_AXIS)
    return float(picked.sum())


def total_variation(p, q) -> float:
    """Largest per-pixel total-variation distance between two probability maps."""
    d = 0.5 * np.abs(_array(p) - _array(q)).sum(axis=CLASS_AXIS)
    return float(d.max())
