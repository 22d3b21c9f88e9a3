"""Registry of finite-difference checks for every differentiable op and loss term.

Each entry builds ``(fn, inputs)`` from a seeded generator; ``fn`` maps
Tensors to a scalar. Non-scalar ops are contracted with a fixed random
weight so every output coordinate reaches the gradient.
"""
from __future__ import annotations

import math
from typing import Callable

import numpy as np

from . import distributions as D
from .models import (
    ArchConfig,
    ParamSet,
    ancillary_forward,
    boxes_to_mask,
    BoxAnnotation,
    init_ancillary,
    init_primary,
    init_selfcorr_head,
    primary_forward,
)
from .selfcorrect import loss_fully_supervised, loss_qconv, loss_weak, qconv_logits, target_distribution
from .tensor import Tensor, ops
from .tensor.gradcheck import GradCheckResult, gradcheck

TINY = ArchConfig(num_classes=2, height=8, width=8, widths=(3, 4, 4), fine_tap=0, coarse_tap=2,
                  decoder_width=4, head_width=6)


def _contract(out: Tensor, w: np.ndarray) -> Tensor:
    return ops.sum(ops.mul(out, Tensor(w)))


def _away_from_zero(a: np.ndarray, eps: float = 0.05) -> np.ndarray:
    return np.where(np.abs(a) < eps, np.sign(a + 1e-12) * eps, a)


def _unary(op: Callable, shape=(2, 3, 4, 4), transform=None):
    def build(rng):
        x = rng.normal(size=shape)
        if transform is not None:
            x = transform(x)
        w = rng.normal(size=np.shape(op(Tensor(x)).data))
        return (lambda t: _contract(op(t), w)), [x]
    return build


def _binary(op: Callable, sa, sb):
    def build(rng):
        a, b = rng.normal(size=sa), rng.normal(size=sb)
        w = rng.normal(size=np.shape(op(Tensor(a), Tensor(b)).data))
        return (lambda x, y: _contract(op(x, y), w)), [a, b]
    return build


def _conv(stride, pad, with_bias=True):
    def build(rng):
        x = rng.normal(size=(2, 3, 7, 6))
        k = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        fn0 = lambda x_, k_, b_=None: ops.conv2d(x_, k_, b_, stride=stride, pad=pad)
        w = rng.normal(size=fn0(Tensor(x), Tensor(k)).dims)
        if with_bias:
            return (lambda x_, k_, b_: _contract(fn0(x_, k_, b_), w)), [x, k, b]
        return (lambda x_, k_: _contract(fn0(x_, k_), w)), [x, k]
    return build


def _soft_ce(rng):
    q = D.make_factorial(rng.normal(size=(2, 3, 4, 4)))
    return (lambda l: ops.soft_cross_entropy_sum(q, l)), [rng.normal(size=(2, 3, 4, 4))]


def _fuse(rng):
    l, la = rng.normal(size=(1, 3, 4, 4)), rng.normal(size=(1, 3, 4, 4))
    w = rng.normal(size=l.shape)
    return (lambda a, b: _contract(D.fuse_linear(a, b, 2.5), w)), [l, la]


# ------------------------------------------------------------------ model-level

def _tiny_batch(rng, n=2):
    images = rng.uniform(0, 1, size=(n, 3, TINY.height, TINY.width))
    labels = rng.integers(0, TINY.out_channels, size=(n, TINY.height, TINY.width))
    boxmasks = np.stack([
        boxes_to_mask([BoxAnnotation(int(rng.integers(1, TINY.num_classes + 1)), 1, 2, 6, 7)],
                      TINY.num_classes, TINY.height, TINY.width, dtype=np.float64)
        for _ in range(n)])
    return images, labels, boxmasks


def _generic(params: ParamSet, rng) -> ParamSet:
    """Random biases, so no pre-activation sits exactly on a ReLU kink."""
    for k, v in params.items():
        if k.endswith(".b"):
            v.data = v.data + rng.normal(0, 0.1, size=v.data.shape)
    return params


def _params_fn(names, body):
    def fn(*tensors):
        return body(ParamSet(zip(names, tensors)))
    return fn


def _eq1(rng):
    theta = _generic(init_ancillary(TINY, int(rng.integers(1 << 30)), np.float64), rng)
    images, labels, bm = _tiny_batch(rng)
    y = D.one_hot(labels, TINY.out_channels)
    names = sorted(theta)
    fn = _params_fn(names, lambda p: loss_fully_supervised(ancillary_forward(p, TINY, images, bm), y))
    return fn, [theta[k].data for k in names]


def _eq2(strategy, alpha=math.inf):
    def build(rng):
        phi = _generic(init_primary(TINY, int(rng.integers(1 << 30)), np.float64), rng)
        theta = _generic(init_ancillary(TINY, int(rng.integers(1 << 30)), np.float64), rng)
        images, labels, bm = _tiny_batch(rng, 3)
        y = D.one_hot(labels[:1], TINY.out_channels)
        la = ancillary_forward(theta, TINY, images[1:], bm[1:]).data
        names = sorted(phi)
        M = 3 * TINY.height * TINY.width
        # the target is a constant of the loss (stop-gradient), fixed at the base point
        q = target_distribution(strategy, primary_forward(phi, TINY, images[1:]).data, la, alpha=alpha)

        def body(p):
            l = primary_forward(p, TINY, images)
            lf = ops.batch_take(l, np.array([0]))
            lw = ops.batch_take(l, np.array([1, 2]))
            return ops.add(loss_fully_supervised(lf, y, M), loss_weak(lw, q, M))
        return _params_fn(names, body), [phi[k].data for k in names]
    return build


def _eq6(rng):
    """Full objective over primary and head parameters together."""
    phi = _generic(init_primary(TINY, int(rng.integers(1 << 30)), np.float64), rng)
    lam = _generic(init_selfcorr_head(TINY, int(rng.integers(1 << 30)), np.float64), rng)
    theta = _generic(init_ancillary(TINY, int(rng.integers(1 << 30)), np.float64), rng)
    images, labels, bm = _tiny_batch(rng, 3)
    y = D.one_hot(labels[:1], TINY.out_channels)
    la = ancillary_forward(theta, TINY, images, bm).data
    names = [f"phi/{k}" for k in sorted(phi)] + [f"lam/{k}" for k in sorted(lam)]
    M = 3 * TINY.height * TINY.width
    base = primary_forward(phi, TINY, images).data
    # both cut points are constants of the loss: q for the W term, primary logits for the head term
    q = target_distribution("conv", base[1:], la[1:], lam=lam)

    def body(p):
        phi_p = ParamSet({k[4:]: v for k, v in p.items() if k.startswith("phi/")})
        lam_p = ParamSet({k[4:]: v for k, v in p.items() if k.startswith("lam/")})
        l = primary_forward(phi_p, TINY, images)
        lf = ops.batch_take(l, np.array([0]))
        lw = ops.batch_take(l, np.array([1, 2]))
        total = ops.add(loss_fully_supervised(lf, y, M), loss_weak(lw, q, M))
        return ops.add(total, loss_qconv(qconv_logits(lam_p, base[:1], la[:1]), y, M))
    arrays = [phi[k].data for k in sorted(phi)] + [lam[k].data for k in sorted(lam)]
    return _params_fn(names, body), arrays


def _qconv_head(rng):
    lam = _generic(init_selfcorr_head(TINY, int(rng.integers(1 << 30)), np.float64), rng)
    l, la = rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(2, 3, 8, 8))
    y = D.one_hot(rng.integers(0, 3, size=(2, 8, 8)), 3)
    names = sorted(lam)
    return _params_fn(names, lambda p: loss_qconv(qconv_logits(p, l, la), y)), [lam[k].data for k in names]


CHECKS: dict = {
    "add": _binary(ops.add, (2, 3, 4), (2, 3, 4)),
    "scale": _unary(lambda t: ops.scale(t, -1.7), (3, 5)),
    "sum": _unary(ops.sum, (3, 4)),
    "mean": _unary(ops.mean, (3, 4)),
    "reshape": _unary(lambda t: ops.reshape(t, (6, 4)), (2, 3, 4)),
    "batch_take": _unary(lambda t: ops.batch_take(t, np.array([2, 0, 2])), (3, 2, 2, 2)),
    "mul": _binary(ops.mul, (2, 3, 4, 4), (2, 3, 4, 4)),
    "mul_batch_broadcast": _binary(ops.mul, (3, 2, 4, 4), (1, 2, 4, 4)),
    "relu": _unary(ops.relu, transform=_away_from_zero),
    "sigmoid": _unary(ops.sigmoid),
    "softmax": _unary(ops.softmax),
    "log_softmax": _unary(ops.log_softmax),
    "soft_cross_entropy": _soft_ce,
    "conv2d": _conv(1, 1),
    "conv2d_stride2": _conv(2, 1),
    "conv2d_nobias": _conv(1, 0, with_bias=False),
    "resize_nearest_up": _unary(lambda t: ops.resize_nearest(t, (7, 9)), (2, 2, 3, 4)),
    "resize_nearest_down": _unary(lambda t: ops.resize_nearest(t, (3, 2)), (2, 2, 5, 5)),
    "concat_channels": _binary(ops.concat_channels, (2, 2, 3, 3), (2, 3, 3, 3)),
    "fuse_linear": _fuse,
    "loss_ancillary": _eq1,
    "loss_primary_none": _eq2("none"),
    "loss_primary_linear": _eq2("linear", alpha=3.0),
    "loss_qconv": _qconv_head,
    "loss_primary_conv": _eq6,
}


def run_checks(names="all", seed: int = 0, n_coords: int = 100, tol: float = 1e-4) -> list[GradCheckResult]:
    if names == "all":
        names = list(CHECKS)
    elif isinstance(names, str):
        names = [names]
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise KeyError(f"unknown ops {unknown}; available: {', '.join(CHECKS)}")
    results = []
    for i, name in enumerate(names):
        rng = np.random.default_rng([seed, i])
        fn, inputs = CHECKS[name](rng)
        results.append(gradcheck(fn, inputs, name=name, n_coords=n_coords, tol=tol, seed=seed))
    return results
