"""Self-correction strategies, their loss terms, and the alpha schedule."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import distributions as D
from .models import ParamSet, selfcorr_head_forward
from .tensor import Tensor, no_grad, ops


class Strategy(str, enum.Enum):
    NONE = "none"
    LINEAR = "linear"
    CONV = "conv"
    EM_FIXED = "em-fixed"  # baseline, not a self-correction method

    @classmethod
    def parse(cls, value) -> "Strategy":
        return value if isinstance(value, cls) else cls(str(value).lower())


@dataclass(frozen=True)
class AlphaSchedule:
    alpha_start: float = 30.0
    alpha_end: float = 0.5
    total_steps: int = 3000

    def __post_init__(self):
        if not self.alpha_start >= self.alpha_end > 0:
            raise ValueError("need alpha_start >= alpha_end > 0")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")


def alpha_at(schedule: AlphaSchedule, step: int) -> float:
    """Geometric interpolation from alpha_start to alpha_end; steps are clamped."""
    t = min(max(step, 0), schedule.total_steps) / schedule.total_steps
    if t == 1.0:
        return float(schedule.alpha_end)
    return schedule.alpha_start * (schedule.alpha_end / schedule.alpha_start) ** t


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def target_distribution(strategy, logits, anc_logits, lam: ParamSet | None = None,
                        alpha: float = math.inf) -> np.ndarray:
    """Soft labels for weak examples, as a plain array (no gradient path).

    none   -> softmax(l_anc)
    linear -> softmax((l + alpha l_anc) / (alpha + 1))
    conv   -> softmax(head(l, l_anc))
    """
    strategy = Strategy.parse(strategy)
    l, la = _data(logits), _data(anc_logits)
    if l.shape != la.shape:
        raise ValueError(f"target_distribution: dims {l.shape} vs {la.shape}")
    if strategy is Strategy.NONE:
        return D.make_factorial(la)
    if strategy is Strategy.LINEAR:
        return D.make_factorial(D.fuse_linear(l, la, alpha))
    if strategy is Strategy.CONV:
        if lam is None:
            raise ValueError("conv strategy needs self-correction head parameters")
        with no_grad():
            return D.make_factorial(selfcorr_head_forward(lam, Tensor(l), Tensor(la)).data)
    raise ValueError(f"no target rule for {strategy.value}")


def clamp_outside_boxes(q: np.ndarray, boxmask: np.ndarray) -> np.ndarray:
    """Force pixels covered by no box to background (optional ablation rule)."""
    outside = boxmask[..., 0:1, :, :] > 0.5
    out = np.where(outside, 0.0, q)
    out[..., 0:1, :, :] = np.where(outside, 1.0, out[..., 0:1, :, :])
    return out.astype(q.dtype, copy=False)


def _pixels(x: Tensor) -> int:
    return int(np.prod(x.dims)) // x.dims[-3]


def loss_fully_supervised(logits: Tensor, y_onehot, normalizer: int | None = None) -> Tensor:
    """Negative log-likelihood of ground truth, divided by the pixel count."""
    n = normalizer or _pixels(logits)
    return ops.scale(D.soft_cross_entropy(y_onehot, logits), 1.0 / n)


def loss_weak(logits: Tensor, q, normalizer: int | None = None) -> Tensor:
    """Soft-label cross-entropy against a fixed target, per pixel."""
    n = normalizer or _pixels(logits)
    return ops.scale(D.soft_cross_entropy(_data(q), logits), 1.0 / n)


def qconv_logits(lam: ParamSet, logits, anc_logits) -> Tensor:
    """Head output with its inputs cut from the graph, so only the head learns."""
    return selfcorr_head_forward(lam, Tensor(_data(logits)), Tensor(_data(anc_logits)))


def loss_qconv(head_logits: Tensor, y_onehot, normalizer: int | None = None) -> Tensor:
    """Negative log-likelihood of ground truth under the self-correction head."""
    return loss_fully_supervised(head_logits, y_onehot, normalizer)
