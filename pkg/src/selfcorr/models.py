"""Primary, ancillary and self-correction networks at desk scale.

The backbone is a plain stride-2 conv encoder with two taps (one fine, one
coarse) feeding a two-conv decoder; the second conv runs at full resolution
on the upsampled features concatenated with the input image. The ancillary model gates both taps with
sigmoid attention maps computed from a rasterized box mask. The
self-correction head maps concatenated primary/ancillary logits to new
logits with two 3x3 convs.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tensor import Tensor, ShapeError, ops
from .tensor.container import load_checkpoint, save_checkpoint


@dataclass(frozen=True)
class ArchConfig:
    num_classes: int = 4
    height: int = 64
    width: int = 64
    in_channels: int = 3
    widths: tuple = (16, 32, 64, 96)
    fine_tap: int = 0
    coarse_tap: int = 3
    decoder_width: int = 32
    head_width: int = 128
    attention_bias: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        factor = 2 ** len(self.widths)
        if self.height % factor or self.width % factor:
            raise ValueError(f"input {self.height}x{self.width} not divisible by downsampling factor {factor}")
        if not 0 <= self.fine_tap < self.coarse_tap < len(self.widths):
            raise ValueError("need 0 <= fine_tap < coarse_tap < number of stages")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")

    @property
    def out_channels(self) -> int:
        return self.num_classes + 1

    def tap_size(self, stage: int) -> tuple:
        f = 2 ** (stage + 1)
        return self.height // f, self.width // f

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(**{k: (tuple(v) if k == "widths" else v) for k, v in d.items()})


@dataclass(frozen=True)
class BoxAnnotation:
    """Axis-aligned box of one object; bounds are inclusive-exclusive."""

    class_id: int
    x0: int
    y0: int
    x1: int
    y1: int

    def as_list(self) -> list:
        return [self.class_id, self.x0, self.y0, self.x1, self.y1]

    @classmethod
    def from_list(cls, v: Sequence[int]) -> "BoxAnnotation":
        return cls(*(int(x) for x in v))


class ParamSet(dict):
    """Named parameter tensors of one model."""

    def arrays(self) -> dict:
        return {k: v.data for k, v in self.items()}

    @classmethod
    def from_arrays(cls, arrays: dict, requires_grad: bool = True) -> "ParamSet":
        return cls({k: Tensor(np.array(v), requires_grad=requires_grad) for k, v in arrays.items()})

    def copy(self) -> "ParamSet":
        return ParamSet.from_arrays(self.arrays(), requires_grad=True)

    def frozen(self) -> "ParamSet":
        return ParamSet.from_arrays(self.arrays(), requires_grad=False)

    def astype(self, dtype) -> "ParamSet":
        return ParamSet({k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad) for k, v in self.items()})

    def num_params(self) -> int:
        return int(sum(v.data.size for v in self.values()))

    def zero_grad(self) -> None:
        for v in self.values():
            v.grad = None


# ------------------------------------------------------------------ boxes

def boxes_to_mask(boxes: Iterable[BoxAnnotation], num_classes: int, height: int, width: int,
                  dtype=np.float32) -> np.ndarray:
    """Rasterize boxes to a ``(C+1) x H x W`` binary mask; channel 0 is 'no box'."""
    mask = np.zeros((num_classes + 1, height, width), dtype=dtype)
    for b in boxes:
        if not 1 <= b.class_id <= num_classes:
            raise ValueError(f"box class {b.class_id} outside 1..{num_classes}")
        if not (0 <= b.x0 < b.x1 <= width and 0 <= b.y0 < b.y1 <= height):
            raise ValueError(f"box {b.as_list()} outside {width}x{height} image")
        mask[b.class_id, b.y0:b.y1, b.x0:b.x1] = 1
    mask[0] = mask[1:].max(axis=0) == 0 if num_classes else 1
    return mask


# ------------------------------------------------------------------ params

def _he_uniform(rng, shape, dtype):
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _conv_params(rng, name, cin, cout, dtype, bias_value=0.0):
    return {
        f"{name}.w": _he_uniform(rng, (cout, cin, 3, 3), dtype),
        f"{name}.b": np.full(cout, bias_value, dtype=dtype),
    }


def _backbone_params(cfg: ArchConfig, rng, dtype) -> dict:
    p = {}
    cin = cfg.in_channels
    for i, w in enumerate(cfg.widths):
        p.update(_conv_params(rng, f"enc{i}", cin, w, dtype))
        cin = w
    dec_in = cfg.widths[cfg.fine_tap] + cfg.widths[cfg.coarse_tap]
    p.update(_conv_params(rng, "dec", dec_in, cfg.decoder_width, dtype))
    # the classifier runs at full resolution and also sees the input image
    p.update(_conv_params(rng, "cls", cfg.decoder_width + cfg.in_channels, cfg.out_channels, dtype))
    return p


def init_primary(cfg: ArchConfig, seed: int, dtype=np.float32) -> ParamSet:
    rng = np.random.default_rng([seed, 1])
    return ParamSet.from_arrays(_backbone_params(cfg, rng, dtype))


def init_ancillary(cfg: ArchConfig, seed: int, dtype=np.float32) -> ParamSet:
    rng = np.random.default_rng([seed, 2])
    p = _backbone_params(cfg, rng, dtype)
    for tap in (cfg.fine_tap, cfg.coarse_tap):
        p.update(_conv_params(rng, f"att{tap}", cfg.out_channels, cfg.widths[tap], dtype,
                              bias_value=cfg.attention_bias))
    return ParamSet.from_arrays(p)


def init_selfcorr_head(cfg: ArchConfig, seed: int, dtype=np.float32) -> ParamSet:
    rng = np.random.default_rng([seed, 3])
    p = {}
    p.update(_conv_params(rng, "sc1", 2 * cfg.out_channels, cfg.head_width, dtype))
    p.update(_conv_params(rng, "sc2", cfg.head_width, cfg.out_channels, dtype))
    return ParamSet.from_arrays(p)


# ------------------------------------------------------------------ forwards

def _conv(params, name, x, stride=1):
    return ops.conv2d(x, params[f"{name}.w"], params[f"{name}.b"], stride=stride, pad=1)


def _as_batch(x, cfg: ArchConfig | None, what: str, channels: int):
    t = ops.as_tensor(x)
    if t.ndim == 3:
        t = ops.reshape(t, (1,) + t.dims)
    if t.ndim != 4:
        raise ShapeError(what, "rank", "3 or 4", t.ndim)
    if t.dims[1] != channels:
        raise ShapeError(what, "C", channels, t.dims[1])
    if cfg is not None:
        if t.dims[2] != cfg.height:
            raise ShapeError(what, "H", cfg.height, t.dims[2])
        if t.dims[3] != cfg.width:
            raise ShapeError(what, "W", cfg.width, t.dims[3])
    return t


def _unbatch(out: Tensor, single: bool) -> Tensor:
    return ops.reshape(out, out.dims[1:]) if single else out


def _encode(params, cfg, x, gates=None):
    taps = {}
    h = x
    for i in range(len(cfg.widths)):
        h = ops.relu(_conv(params, f"enc{i}", h, stride=2))
        if i in (cfg.fine_tap, cfg.coarse_tap):
            # gating applies to the decoder path only; the encoder continues ungated
            taps[i] = ops.mul(h, gates[i]) if gates is not None else h
        if i == cfg.coarse_tap:
            break
    return taps


def _decode(params, cfg, taps, image):
    fine = taps[cfg.fine_tap]
    coarse = ops.resize_nearest(taps[cfg.coarse_tap], fine.dims[-2:])
    h = ops.relu(_conv(params, "dec", ops.concat_channels(fine, coarse)))
    h = ops.resize_nearest(h, (cfg.height, cfg.width))
    return _conv(params, "cls", ops.concat_channels(h, image))


def primary_forward(phi: ParamSet, cfg: ArchConfig, image) -> Tensor:
    """Image(s) ``3 x H x W`` (or batched) to full-resolution class logits."""
    single = ops.as_tensor(image).ndim == 3
    x = _as_batch(image, cfg, "primary_forward", cfg.in_channels)
    return _unbatch(_decode(phi, cfg, _encode(phi, cfg, x), x), single)


def attention_maps(theta: ParamSet, cfg: ArchConfig, boxmask) -> dict:
    """Sigmoid attention per tap, computed from the box mask resized to the tap."""
    b = _as_batch(boxmask, cfg, "ancillary_forward", cfg.out_channels)
    gates = {}
    for tap in (cfg.fine_tap, cfg.coarse_tap):
        small = ops.resize_nearest(b, cfg.tap_size(tap))
        gates[tap] = ops.sigmoid(_conv(theta, f"att{tap}", small))
    return gates


def ancillary_forward(theta: ParamSet, cfg: ArchConfig, image, boxmask) -> Tensor:
    """Box-conditioned segmentation logits, full resolution."""
    single = ops.as_tensor(image).ndim == 3
    x = _as_batch(image, cfg, "ancillary_forward", cfg.in_channels)
    gates = attention_maps(theta, cfg, boxmask)
    if gates[cfg.fine_tap].dims[0] != x.dims[0]:
        raise ShapeError("ancillary_forward", "N", x.dims[0], gates[cfg.fine_tap].dims[0])
    return _unbatch(_decode(theta, cfg, _encode(theta, cfg, x, gates), x), single)


def selfcorr_head_forward(lam: ParamSet, logits, anc_logits) -> Tensor:
    """Two 3x3 convs (ReLU between) over concatenated primary and ancillary logits."""
    logits, anc_logits = ops.as_tensor(logits), ops.as_tensor(anc_logits)
    if logits.dims != anc_logits.dims:
        raise ShapeError("selfcorr_head_forward", "all", logits.dims, anc_logits.dims)
    h = ops.relu(_conv(lam, "sc1", ops.concat_channels(logits, anc_logits)))
    return _conv(lam, "sc2", h)


# ------------------------------------------------------------------ io

def save_model(directory, params: ParamSet, cfg: ArchConfig, kind: str, extra: dict | None = None) -> Path:
    meta = {"kind": kind, "arch": cfg.to_dict()}
    if extra:
        meta.update(extra)
    return save_checkpoint(directory, params.arrays(), meta)


def load_model(directory) -> tuple[ParamSet, ArchConfig, dict]:
    arrays, meta = load_checkpoint(directory)
    return ParamSet.from_arrays(arrays, requires_grad=False), ArchConfig.from_dict(meta["arch"]), meta


def averaging_head(cfg: ArchConfig, dtype=np.float64) -> ParamSet:
    """Hand-set head weights whose output is the mean of the two logit blocks.

    Layer 1 passes each input channel through as a +/- pair (so the ReLU
    loses nothing); layer 2 recombines the pairs with weight 1/2.
    """
    k = cfg.out_channels
    width = cfg.head_width
    if width < 4 * k:
        raise ValueError("head too narrow to represent averaging")
    w1 = np.zeros((width, 2 * k, 3, 3), dtype=dtype)
    w2 = np.zeros((k, width, 3, 3), dtype=dtype)
    for c in range(2 * k):
        w1[2 * c, c, 1, 1] = 1.0
        w1[2 * c + 1, c, 1, 1] = -1.0
        w2[c % k, 2 * c, 1, 1] = 0.5
        w2[c % k, 2 * c + 1, 1, 1] = -0.5
    return ParamSet.from_arrays({
        "sc1.w": w1, "sc1.b": np.zeros(width, dtype=dtype),
        "sc2.w": w2, "sc2.b": np.zeros(k, dtype=dtype),
    })


def arch_json(cfg: ArchConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True)
