"""Synthetic shape scenes with masks and boxes, dataset splits, and on-disk IO."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .models import BoxAnnotation
from .tensor.container import load_tensor, save_tensor

SHAPE_KINDS = ("disk", "rectangle", "triangle", "ring")

# base RGB per class; per-instance jitter makes neighbouring classes overlap
_CLASS_COLORS = np.array([
    [0.85, 0.30, 0.25],
    [0.30, 0.75, 0.35],
    [0.30, 0.40, 0.85],
    [0.80, 0.70, 0.25],
])


@dataclass(frozen=True)
class SceneConfig:
    height: int = 64
    width: int = 64
    num_classes: int = 4
    min_shapes: int = 1
    max_shapes: int = 3
    min_size: int = 6
    max_size: int = 14
    color_jitter: float = 0.18
    pixel_noise: float = 0.08
    allow_overlap: bool = True
    background: str = "texture"  # texture | flat

    def __post_init__(self):
        if not 2 <= self.num_classes <= len(SHAPE_KINDS):
            raise ValueError(f"num_classes must be in 2..{len(SHAPE_KINDS)}")
        if not 0 <= self.min_shapes <= self.max_shapes:
            raise ValueError("need 0 <= min_shapes <= max_shapes")
        if not 2 <= self.min_size <= self.max_size:
            raise ValueError("need 2 <= min_size <= max_size")
        if 2 * self.max_size + 2 > min(self.height, self.width):
            raise ValueError("shapes do not fit inside the canvas")
        if self.background not in ("texture", "flat"):
            raise ValueError(f"unknown background mode {self.background!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Sample:
    id: str
    image: np.ndarray                    # 3 x H x W float32 in [0, 1]
    mask: Optional[np.ndarray]           # H x W uint8 class indices, None on the weak split
    boxes: list = field(default_factory=list)

    def without_mask(self) -> "Sample":
        return replace(self, mask=None)


@dataclass
class DatasetSplit:
    fully: list
    weak: list
    seed: int = 0


# ------------------------------------------------------------------ rendering

def _shape_mask(kind: str, size: int, cy: float, cx: float, yy, xx, rng) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        return dy * dy + dx * dx <= size * size
    if kind == "rectangle":
        aspect = rng.uniform(0.55, 1.0)
        hy, hx = (size, size * aspect) if rng.random() < 0.5 else (size * aspect, size)
        return (np.abs(dy) <= hy) & (np.abs(dx) <= hx)
    if kind == "triangle":
        # isosceles, apex up: inside when below the apex and within the slanted sides
        t = (dy + size) / (2 * size)
        return (t >= 0) & (t <= 1) & (np.abs(dx) <= t * size)
    if kind == "ring":
        r2 = dy * dy + dx * dx
        inner = size * rng.uniform(0.45, 0.6)
        return (r2 <= size * size) & (r2 >= inner * inner)
    raise ValueError(kind)


def _background(cfg: SceneConfig, rng) -> np.ndarray:
    base = rng.uniform(0.2, 0.8, size=(3, 1, 1))
    img = np.broadcast_to(base, (3, cfg.height, cfg.width)).copy()
    if cfg.background == "texture":
        blobs = rng.normal(size=(3, cfg.height // 4 + 1, cfg.width // 4 + 1))
        smooth = ndimage.zoom(blobs, (1, 4, 4), order=1)[:, :cfg.height, :cfg.width]
        img += 0.12 * smooth
    return img


def generate_scene(cfg: SceneConfig, seed, sample_id: str | None = None) -> Sample:
    """Render one scene; identical ``seed`` gives a bit-identical sample."""
    rng = np.random.default_rng(seed)
    h, w = cfg.height, cfg.width
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    image = _background(cfg, rng)
    labels = np.zeros((h, w), dtype=np.uint8)
    instance = np.full((h, w), -1, dtype=np.int32)

    n_shapes = int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))
    placed = []
    for k in range(n_shapes):
        cls = int(rng.integers(1, cfg.num_classes + 1))
        size = int(rng.integers(cfg.min_size, cfg.max_size + 1))
        for _ in range(50):
            cy = rng.uniform(size + 1, h - size - 1)
            cx = rng.uniform(size + 1, w - size - 1)
            region = _shape_mask(SHAPE_KINDS[cls - 1], size, cy, cx, yy, xx, rng)
            if cfg.allow_overlap or not (ndimage.binary_dilation(region) & (instance >= 0)).any():
                break
        else:
            continue
        if not region.any():
            continue
        color = _CLASS_COLORS[cls - 1] + rng.normal(0, cfg.color_jitter, size=3)
        image[:, region] = color[:, None]
        labels[region] = cls
        instance[region] = k
        placed.append((k, cls))

    image += rng.normal(0, cfg.pixel_noise, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)

    boxes = []
    for k, cls in placed:
        ys, xs = np.nonzero(instance == k)
        if ys.size == 0:  # fully occluded
            continue
        boxes.append(BoxAnnotation(cls, int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1))
    sid = sample_id if sample_id is not None else f"scene_{seed}"
    return Sample(sid, image, labels, boxes)


def generate_dataset(cfg: SceneConfig, n: int, seed: int, prefix: str = "img") -> list:
    return [generate_scene(cfg, [seed, i], f"{prefix}{seed}_{i:05d}") for i in range(n)]


# ------------------------------------------------------------------ splits

def split_dataset(samples: list, f_size: int, seed: int) -> DatasetSplit:
    """Seeded shuffle; the first ``f_size`` keep masks, the rest lose them."""
    if not 0 <= f_size <= len(samples):
        raise ValueError(f"f_size {f_size} not in 0..{len(samples)}")
    order = np.random.default_rng(seed).permutation(len(samples))
    fully = [samples[i] for i in order[:f_size]]
    weak = [samples[i].without_mask() for i in order[f_size:]]
    return DatasetSplit(fully, weak, seed)


def split_half(fully: list, seed: int) -> tuple:
    """Seeded disjoint halves; the first gets the extra sample when odd."""
    if len(fully) < 2:
        raise ValueError("need at least 2 samples to split in half")
    order = np.random.default_rng(seed).permutation(len(fully))
    cut = (len(fully) + 1) // 2
    return [fully[i] for i in order[:cut]], [fully[i] for i in order[cut:]]


# ------------------------------------------------------------------ label noise

def _objects(mask: np.ndarray):
    for cls in np.unique(mask):
        if cls == 0:
            continue
        comps, n = ndimage.label(mask == cls)
        for j in range(1, n + 1):
            yield int(cls), comps == j


def inject_label_noise(mask: np.ndarray, rate: float, seed) -> np.ndarray:
    """Randomly dilate or erode whole objects by 1-3 pixels.

    Each connected region of a class is hit with probability ``rate``.
    Changes are computed from the input mask and applied in a fixed order.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must be in [0, 1]")
    rng = np.random.default_rng(seed)
    out = mask.copy()
    for cls, region in _objects(mask):
        hit = rng.random() < rate
        grow = rng.random() < 0.5
        radius = int(rng.integers(1, 4))
        if not hit:
            continue
        if grow:
            out[ndimage.binary_dilation(region, iterations=radius) & ~region] = cls
        else:
            shrunk = ndimage.binary_erosion(region, iterations=radius, border_value=0)
            out[region & ~shrunk & (out == cls)] = 0
    return out


# ------------------------------------------------------------------ IO

def write_dataset(directory, groups: dict, meta: dict | None = None) -> Path:
    """Write ``{split_name: [Sample, ...]}`` as containers plus ``manifest.json``."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for split, samples in groups.items():
        for s in samples:
            img_name = f"images/{s.id}.stns"
            save_tensor(directory / img_name, s.image.astype(np.float32))
            mask_name = None
            if s.mask is not None:
                mask_name = f"masks/{s.id}.stns"
                save_tensor(directory / mask_name, s.mask.astype(np.uint8))
            entries.append({
                "id": s.id,
                "split": split,
                "boxes": [b.as_list() for b in s.boxes],
                "image": img_name,
                "mask": mask_name,
            })
    manifest = dict(meta or {})
    manifest["samples"] = entries
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return directory


def read_manifest(directory) -> dict:
    return json.loads((Path(directory) / "manifest.json").read_text())


def read_dataset(directory) -> tuple[dict, dict]:
    """Return ``({split_name: [Sample, ...]}, manifest_without_samples)``."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    groups: dict = {}
    for e in manifest.pop("samples"):
        mask = load_tensor(directory / e["mask"]) if e["mask"] else None
        s = Sample(e["id"], load_tensor(directory / e["image"]), mask,
                   [BoxAnnotation.from_list(b) for b in e["boxes"]])
        groups.setdefault(e["split"], []).append(s)
    return groups, manifest


def write_split(directory, split: DatasetSplit, test: list | None = None, meta: dict | None = None) -> Path:
    meta = dict(meta or {})
    meta["split_seed"] = split.seed
    groups = {"fully": split.fully, "weak": [s.without_mask() for s in split.weak]}
    if test:
        groups["test"] = test
    return write_dataset(directory, groups, meta)


def read_split(directory) -> tuple[DatasetSplit, list, dict]:
    groups, meta = read_dataset(directory)
    split = DatasetSplit(groups.get("fully", []), groups.get("weak", []), int(meta.get("split_seed", 0)))
    return split, groups.get("test", []), meta
