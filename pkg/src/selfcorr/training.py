"""Training loops: ancillary model, primary model under each strategy, and the
three-stage protocol for the convolutional self-correction head."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import distributions as D
from .data import Sample, split_half
from .models import (
    ArchConfig,
    ParamSet,
    ancillary_forward,
    boxes_to_mask,
    init_ancillary,
    init_primary,
    init_selfcorr_head,
    primary_forward,
)
from .selfcorrect import (
    AlphaSchedule,
    Strategy,
    alpha_at,
    clamp_outside_boxes,
    loss_fully_supervised,
    loss_qconv,
    loss_weak,
    qconv_logits,
    target_distribution,
)
from .tensor import no_grad, ops

log = logging.getLogger(__name__)


class StageOrderError(RuntimeError):
    """A protocol stage was invoked before the stage it depends on."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.007
    momentum: float = 0.9
    steps: int = 3000
    batch_size: int = 8
    seed: int = 0
    lr_power: float = 0.9
    strategy: str = "none"
    alpha_start: float = 30.0
    alpha_end: float = 0.5
    clamp_outside_boxes: bool = False
    em_bias: float = 5.0
    ancillary_steps: Optional[int] = None
    pretrain_steps: Optional[int] = None
    grad_clip: Optional[float] = None
    dtype: str = "float32"

    def __post_init__(self):
        if self.steps <= 0:
            raise ValueError("steps must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        Strategy.parse(self.strategy)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def with_overrides(self, **kw) -> "TrainConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


@dataclass
class TrainReport:
    name: str
    records: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    wall_clock: float = 0.0

    def log_step(self, **values) -> None:
        self.records.append({k: (float(v) if isinstance(v, (float, np.floating)) else v)
                             for k, v in values.items()})

    def losses(self, key: str = "loss") -> np.ndarray:
        return np.array([r.get(key, np.nan) for r in self.records], dtype=float)

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
            fh.write(json.dumps({"name": self.name, "checkpoints": self.checkpoints,
                                 "wall_clock_s": round(self.wall_clock, 3)}, sort_keys=True) + "\n")


class SGD:
    """SGD with heavy-ball momentum and polynomial learning-rate decay."""

    def __init__(self, params: ParamSet, lr: float, momentum: float, total_steps: int,
                 power: float = 0.9, grad_clip: float | None = None):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.total = total_steps
        self.power = power
        self.grad_clip = grad_clip
        self.velocity = {k: np.zeros_like(v.data) for k, v in params.items()}

    def lr_at(self, step: int) -> float:
        return self.lr * (1.0 - min(step, self.total) / self.total) ** self.power

    def step(self, step: int) -> float:
        lr = self.lr_at(step)
        scale = 1.0
        if self.grad_clip is not None:
            norm = np.sqrt(sum(float((p.grad ** 2).sum()) for p in self.params.values() if p.grad is not None))
            if norm > self.grad_clip:
                scale = self.grad_clip / norm
        for name in sorted(self.params):
            p = self.params[name]
            if p.grad is None:
                continue
            v = self.velocity[name]
            v *= self.momentum
            v += p.grad * scale
            p.data = p.data - lr * v
            p.grad = None
        return lr


# ------------------------------------------------------------------ arrays

@dataclass
class Arrays:
    images: np.ndarray
    boxmasks: np.ndarray
    labels: Optional[np.ndarray]

    def __len__(self) -> int:
        return len(self.images)


def stack_samples(samples: list, arch: ArchConfig, dtype=np.float32, need_masks: bool = False) -> Arrays:
    n, h, w = len(samples), arch.height, arch.width
    images = np.zeros((n, arch.in_channels, h, w), dtype=dtype)
    boxmasks = np.zeros((n, arch.out_channels, h, w), dtype=dtype)
    labels = np.zeros((n, h, w), dtype=np.int64) if need_masks else None
    for i, s in enumerate(samples):
        if s.image.shape != (arch.in_channels, h, w):
            raise ValueError(f"sample {s.id}: image dims {s.image.shape} do not match {arch.in_channels}x{h}x{w}")
        images[i] = s.image
        boxmasks[i] = boxes_to_mask(s.boxes, arch.num_classes, h, w, dtype=dtype)
        if need_masks:
            if s.mask is None:
                raise ValueError(f"sample {s.id} has no mask")
            labels[i] = s.mask
    return Arrays(images, boxmasks, labels)


def infer_logits(kind: str, params: ParamSet, arch: ArchConfig, images: np.ndarray,
                 boxmasks: np.ndarray | None = None, batch: int = 64) -> np.ndarray:
    """Forward a whole array of images without recording a graph."""
    out = np.zeros((len(images), arch.out_channels, arch.height, arch.width), dtype=images.dtype)
    with no_grad():
        for i in range(0, len(images), batch):
            sl = slice(i, i + batch)
            if kind == "primary":
                out[sl] = primary_forward(params, arch, images[sl]).data
            elif kind == "ancillary":
                out[sl] = ancillary_forward(params, arch, images[sl], boxmasks[sl]).data
            else:
                raise ValueError(f"unknown model kind {kind!r}")
    return out


def _one_hot(labels: np.ndarray, arch: ArchConfig, dtype) -> np.ndarray:
    return D.one_hot(labels, arch.out_channels, dtype=dtype)


def _batch_indices(rng, n: int, batch: int) -> np.ndarray:
    return np.sort(rng.choice(n, size=min(batch, n), replace=False)) if n >= batch else rng.integers(0, n, size=batch)


# ------------------------------------------------------------------ ancillary

def train_ancillary(F: list, arch: ArchConfig, cfg: TrainConfig, steps: int | None = None,
                    report: TrainReport | None = None) -> tuple[ParamSet, TrainReport]:
    """Fit the box-conditioned model on fully supervised samples; returns frozen params."""
    missing = [s.id for s in F if s.mask is None]
    if missing:
        raise ValueError(f"ancillary training needs masks; missing for {missing[:3]}")
    if not F:
        raise ValueError("ancillary training needs at least one sample")
    steps = steps or cfg.ancillary_steps or cfg.steps
    dt = cfg.np_dtype
    arr = stack_samples(F, arch, dt, need_masks=True)
    theta = init_ancillary(arch, cfg.seed, dt)
    opt = SGD(theta, cfg.lr, cfg.momentum, steps, cfg.lr_power, cfg.grad_clip)
    rng = np.random.default_rng([cfg.seed, 11])
    report = report or TrainReport("ancillary")
    t0 = time.perf_counter()
    for step in range(steps):
        idx = _batch_indices(rng, len(arr), cfg.batch_size)
        logits = ancillary_forward(theta, arch, arr.images[idx], arr.boxmasks[idx])
        loss = loss_fully_supervised(logits, _one_hot(arr.labels[idx], arch, dt))
        loss.backward()
        lr = opt.step(step)
        report.log_step(step=step, loss=loss.item(), f_loss=loss.item(), lr=lr)
    report.wall_clock += time.perf_counter() - t0
    return theta.frozen(), report


# ------------------------------------------------------------------ primary

def em_fixed_target(logits, boxmask: np.ndarray, bias: float) -> np.ndarray:
    """Box-constrained soft labels from the network's own logits.

    Adds ``bias`` to class c inside class-c boxes and to background outside
    all boxes, then takes the per-pixel softmax.
    """
    l = logits.data if hasattr(logits, "data") and not isinstance(logits, np.ndarray) else np.asarray(logits)
    if l.shape != boxmask.shape:
        raise ValueError(f"em_fixed_target: dims {l.shape} vs {boxmask.shape}")
    return D.make_factorial(l + bias * boxmask)


def train_primary(strategy, F: list, W: list, theta: ParamSet | None, arch: ArchConfig,
                  cfg: TrainConfig, lam: ParamSet | None = None, phi: ParamSet | None = None,
                  steps: int | None = None, report: TrainReport | None = None,
                  anc_logits_W: np.ndarray | None = None,
                  W_hard_labels: np.ndarray | None = None):
    """Train the image-only model on a mixed F/W stream.

    Returns ``(phi, lam, report)``; ``lam`` is None except for the conv
    strategy. ``theta`` is only read. Batches are drawn uniformly from the
    union of F and W, so each set contributes in proportion to its size.
    ``W_hard_labels`` replaces weak targets with one-hot labels (used by the
    noisy-label control).
    """
    strategy = Strategy.parse(strategy)
    steps = steps or cfg.steps
    dt = cfg.np_dtype
    missing = [s.id for s in F if s.mask is None]
    if missing:
        raise ValueError(f"fully supervised samples need masks; missing for {missing[:3]}")
    report = report or TrainReport(f"primary-{strategy.value}")
    uses_anc = W_hard_labels is None and (strategy in (Strategy.NONE, Strategy.LINEAR, Strategy.CONV))
    if strategy is Strategy.CONV and lam is None:
        if not cfg.pretrain_steps:
            raise StageOrderError("conv strategy needs a pretrained self-correction head (run the pretraining stage)")
        if theta is None:
            raise ValueError("conv strategy needs ancillary parameters")
        phi, lam, _ = pretrain_selfcorr(F, theta, arch, cfg, report=report)
    if (uses_anc and W) or strategy is Strategy.CONV:
        if theta is None:
            raise ValueError(f"{strategy.value} strategy needs ancillary parameters")

    fa = stack_samples(F, arch, dt, need_masks=True) if F else None
    wa = stack_samples(W, arch, dt) if W else None
    nF, nW = len(F), len(W)
    if nF + nW == 0:
        raise ValueError("no training samples")
    M = arch.height * arch.width
    B = cfg.batch_size

    yF = _one_hot(fa.labels, arch, dt) if fa is not None else None
    if wa is not None and uses_anc and anc_logits_W is None:
        anc_logits_W = infer_logits("ancillary", theta, arch, wa.images, wa.boxmasks)
    anc_logits_F = None
    if strategy is Strategy.CONV and fa is not None:
        anc_logits_F = infer_logits("ancillary", theta, arch, fa.images, fa.boxmasks)
    yW_hard = _one_hot(W_hard_labels, arch, dt) if W_hard_labels is not None else None

    phi = phi.copy() if phi is not None else init_primary(arch, cfg.seed, dt)
    train_params = ParamSet(phi)
    if strategy is Strategy.CONV:
        lam = lam.copy()
        train_params.update({f"lambda/{k}": v for k, v in lam.items()})
    opt = SGD(train_params, cfg.lr, cfg.momentum, steps, cfg.lr_power, cfg.grad_clip)
    schedule = AlphaSchedule(cfg.alpha_start, cfg.alpha_end, steps)
    rng = np.random.default_rng([cfg.seed, 21])
    t0 = time.perf_counter()

    for step in range(steps):
        idx = _batch_indices(rng, nF + nW, B)
        fi = idx[idx < nF]
        wi = idx[idx >= nF] - nF
        parts = []
        if fi.size:
            parts.append(fa.images[fi])
        if wi.size:
            parts.append(wa.images[wi])
        logits = primary_forward(phi, arch, np.concatenate(parts) if len(parts) > 1 else parts[0])
        norm = len(idx) * M
        alpha = alpha_at(schedule, step)
        terms = {}
        if fi.size:
            lf = ops.batch_take(logits, np.arange(fi.size)) if wi.size else logits
            terms["f_loss"] = loss_fully_supervised(lf, yF[fi], norm)
            if strategy is Strategy.CONV:
                terms["qconv_loss"] = loss_qconv(qconv_logits(lam, lf, anc_logits_F[fi]), yF[fi], norm)
        if wi.size:
            lw = ops.batch_take(logits, np.arange(fi.size, len(idx))) if fi.size else logits
            if yW_hard is not None:
                q = yW_hard[wi]
            elif strategy is Strategy.EM_FIXED:
                q = em_fixed_target(lw.data, wa.boxmasks[wi], cfg.em_bias)
            else:
                q = target_distribution(strategy, lw.data, anc_logits_W[wi], lam, alpha)
            if cfg.clamp_outside_boxes and yW_hard is None:
                q = clamp_outside_boxes(q, wa.boxmasks[wi])
            terms["w_loss"] = loss_weak(lw, q.astype(dt, copy=False), norm)
        total = None
        for t in terms.values():
            total = t if total is None else ops.add(total, t)
        total.backward()
        lr = opt.step(step)
        rec = {k: v.item() for k, v in terms.items()}
        report.log_step(step=step, loss=total.item(), alpha=alpha, lr=lr, **rec)

    report.wall_clock += time.perf_counter() - t0
    return phi.frozen(), (lam.frozen() if lam is not None else None), report


def pretrain_selfcorr(F: list, theta: ParamSet, arch: ArchConfig, cfg: TrainConfig,
                      phi: ParamSet | None = None, lam: ParamSet | None = None,
                      steps: int | None = None, report: TrainReport | None = None):
    """Stage 2: fit primary and head on F alone (first and last loss terms)."""
    steps = steps or cfg.pretrain_steps or cfg.steps
    lam = lam if lam is not None else init_selfcorr_head(arch, cfg.seed, cfg.np_dtype)
    return train_primary(Strategy.CONV, F, [], theta, arch, cfg, lam=lam, phi=phi, steps=steps,
                         report=report or TrainReport("pretrain-conv"))


class ConvProtocol:
    """Three ordered stages for convolutional self-correction.

    1. ancillary on one half of F; 2. primary + head on all of F;
    3. fine-tune primary + head on F and W with the full objective.
    """

    def __init__(self, F: list, W: list, arch: ArchConfig, cfg: TrainConfig):
        if len(F) < 2:
            raise ValueError("conv protocol needs |F| >= 2")
        self.F, self.W, self.arch, self.cfg = F, W, arch, cfg
        self.theta = self.phi = self.lam = None
        self.lam_init = None
        self.stage = 0
        self.reports: dict = {}

    def stage1(self) -> ParamSet:
        half_a, _ = split_half(self.F, self.cfg.seed)
        self.theta, self.reports["stage1"] = train_ancillary(half_a, self.arch, self.cfg)
        self.stage = 1
        return self.theta

    def stage2(self):
        if self.stage < 1:
            raise StageOrderError("stage 2 needs the stage-1 ancillary model")
        self.lam_init = init_selfcorr_head(self.arch, self.cfg.seed, self.cfg.np_dtype).frozen()
        self.phi, self.lam, self.reports["stage2"] = pretrain_selfcorr(
            self.F, self.theta, self.arch, self.cfg, lam=self.lam_init)
        self.stage = 2
        return self.phi, self.lam

    def stage3(self):
        if self.stage < 2:
            raise StageOrderError("stage 3 needs the stage-2 primary model and head")
        self.phi, self.lam, self.reports["stage3"] = train_primary(
            Strategy.CONV, self.F, self.W, self.theta, self.arch, self.cfg,
            lam=self.lam, phi=self.phi, report=TrainReport("finetune-conv"))
        self.stage = 3
        return self.phi, self.lam

    def run(self):
        self.stage1()
        self.stage2()
        self.stage3()
        return self.theta, self.phi, self.lam


def run_protocol_conv(F: list, W: list, arch: ArchConfig, cfg: TrainConfig):
    """Run all three stages; returns ``(theta, phi, lam)``."""
    return ConvProtocol(F, W, arch, cfg).run()
