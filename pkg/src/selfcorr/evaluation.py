"""Dataset-level intersection-over-union and model evaluation."""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from .models import ArchConfig, ParamSet
from .selfcorrect import clamp_outside_boxes
from .tensor.container import save_tensor
from .training import infer_logits, stack_samples


@dataclass
class IouReport:
    intersection: np.ndarray   # per class, int64
    union: np.ndarray          # per class, int64
    num_images: int

    @property
    def num_classes(self) -> int:
        return len(self.intersection)

    @property
    def per_class(self) -> np.ndarray:
        """IOU per class; NaN where the union is empty."""
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.union > 0, self.intersection / np.maximum(self.union, 1), np.nan)

    @property
    def miou(self) -> float:
        """Mean over classes with a nonempty union, computed exactly from the integer counts."""
        keep = [(int(i), int(u)) for i, u in zip(self.intersection, self.union) if u > 0]
        if not keep:
            return float("nan")
        return float(sum(Fraction(i, u) for i, u in keep) / len(keep))

    def merge(self, other: "IouReport") -> "IouReport":
        return IouReport(self.intersection + other.intersection, self.union + other.union,
                         self.num_images + other.num_images)

    def to_dict(self) -> dict:
        return {
            "miou": self.miou,
            "per_class_iou": [None if np.isnan(v) else float(v) for v in self.per_class],
            "intersection": self.intersection.tolist(),
            "union": self.union.tolist(),
            "num_images": self.num_images,
        }


def confusion_counts(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> tuple:
    """Per-class intersection and union for one label map."""
    if pred.shape != gt.shape:
        raise ValueError(f"prediction dims {pred.shape} differ from ground truth {gt.shape}")
    p = pred.ravel().astype(np.int64)
    g = gt.ravel().astype(np.int64)
    if p.size and (p.min() < 0 or g.min() < 0 or p.max() >= num_classes or g.max() >= num_classes):
        raise ValueError(f"class index outside 0..{num_classes - 1}")
    inter = np.bincount(p[p == g], minlength=num_classes)
    union = np.bincount(p, minlength=num_classes) + np.bincount(g, minlength=num_classes) - inter
    return inter, union


def miou(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray], num_classes: int) -> IouReport:
    """Sum intersections and unions over all images, then divide."""
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} ground-truth maps")
    inter = np.zeros(num_classes, dtype=np.int64)
    union = np.zeros(num_classes, dtype=np.int64)
    for p, g in zip(preds, gts):
        i, u = confusion_counts(np.asarray(p), np.asarray(g), num_classes)
        inter += i
        union += u
    return IouReport(inter, union, len(preds))


def predict(kind: str, params: ParamSet, arch: ArchConfig, samples: list,
            clamp: bool = False, batch: int = 64) -> np.ndarray:
    """Argmax label maps ``(N, H, W)`` for a list of samples."""
    arr = stack_samples(samples, arch, dtype=next(iter(params.values())).data.dtype)
    logits = infer_logits(kind, params, arch, arr.images, arr.boxmasks if kind == "ancillary" else None, batch)
    if clamp:
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        logits = clamp_outside_boxes(e / e.sum(axis=1, keepdims=True), arr.boxmasks)
    return logits.argmax(axis=1).astype(np.uint8)


def evaluate(kind: str, params: ParamSet, arch: ArchConfig, samples: list, clamp: bool = False,
             dump_masks=None) -> IouReport:
    """Argmax predictions on ``samples`` scored against their masks."""
    if kind not in ("primary", "ancillary"):
        raise ValueError(f"unknown model kind {kind!r}")
    missing = [s.id for s in samples if s.mask is None]
    if missing:
        raise ValueError(f"evaluation needs masks; missing for {missing[:3]}")
    preds = predict(kind, params, arch, samples, clamp=clamp)
    if dump_masks is not None:
        out = Path(dump_masks)
        out.mkdir(parents=True, exist_ok=True)
        for s, p in zip(samples, preds):
            save_tensor(out / f"{s.id}.stns", p)
    return miou(list(preds), [s.mask for s in samples], arch.out_channels)
