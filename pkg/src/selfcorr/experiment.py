"""Grid runner: strategies x fully-supervised set sizes x seeds.

Each cell generates data, splits it, trains every variant and scores it on a
held-out test set. A failing cell is recorded and the grid continues.
"""
from __future__ import annotations

import json
import logging
import statistics
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import SceneConfig, generate_dataset, inject_label_noise, split_dataset, split_half
from .distributions import one_hot
from .evaluation import evaluate
from .models import ArchConfig, save_model, selfcorr_head_forward
from .selfcorrect import Strategy, loss_qconv
from .tensor import Tensor, no_grad
from .training import (
    ConvProtocol,
    TrainConfig,
    infer_logits,
    stack_samples,
    train_ancillary,
    train_primary,
)

log = logging.getLogger(__name__)

# row order of the emitted table; ancillary first
ROW_ORDER = ("ancillary", "f-only", "none", "linear", "conv", "em-fixed", "noisy-labels")
VARIANTS = ("f-only", "none", "linear", "conv", "em-fixed", "noisy-labels")


@dataclass
class ExperimentSpec:
    scene: SceneConfig
    arch: ArchConfig
    train: TrainConfig
    num_images: int = 2000
    num_test: int = 300
    f_sizes: list = field(default_factory=lambda: [50, 200])
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    variants: list = field(default_factory=lambda: ["f-only", "none", "linear", "conv"])
    noise_rate: float = 0.5
    save_checkpoints: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        d = dict(d)
        known = {"scene", "arch", "train", "num_images", "num_test", "f_sizes", "seeds", "variants",
                 "noise_rate", "save_checkpoints"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown experiment keys: {sorted(unknown)}")
        scene = SceneConfig(**d.pop("scene", {}))
        arch_d = dict(d.pop("arch", {}))
        arch_d.setdefault("height", scene.height)
        arch_d.setdefault("width", scene.width)
        arch_d.setdefault("num_classes", scene.num_classes)
        arch = ArchConfig.from_dict(arch_d)
        if (arch.height, arch.width, arch.num_classes) != (scene.height, scene.width, scene.num_classes):
            raise ValueError("arch and scene disagree on image size or class count")
        train = TrainConfig.from_dict(d.pop("train", {}))
        spec = cls(scene, arch, train, **d)
        bad = [v for v in spec.variants if v not in VARIANTS]
        if bad:
            raise ValueError(f"unknown variants {bad}; choose from {list(VARIANTS)}")
        if any(not 2 <= f <= spec.num_images for f in spec.f_sizes):
            raise ValueError("every F size must lie in 2..num_images")
        return spec

    @classmethod
    def load(cls, path) -> "ExperimentSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {
            "scene": self.scene.to_dict(), "arch": self.arch.to_dict(), "train": self.train.to_dict(),
            "num_images": self.num_images, "num_test": self.num_test, "f_sizes": list(self.f_sizes),
            "seeds": list(self.seeds), "variants": list(self.variants), "noise_rate": self.noise_rate,
            "save_checkpoints": self.save_checkpoints,
        }


def heldout_qconv(phi, theta, lam, arch, samples) -> float:
    """Per-pixel q_conv loss of a head on samples it never trained on."""
    dt = next(iter(phi.values())).data.dtype
    arr = stack_samples(samples, arch, dt, need_masks=True)
    l = infer_logits("primary", phi, arch, arr.images)
    la = infer_logits("ancillary", theta, arch, arr.images, arr.boxmasks)
    y = one_hot(arr.labels, arch.out_channels, dtype=dt)
    with no_grad():
        return float(loss_qconv(selfcorr_head_forward(lam, Tensor(l), Tensor(la)), y).item())


class CellRunner:
    def __init__(self, spec: ExperimentSpec, seed: int, f_size: int, out: Path | None):
        self.spec, self.seed, self.f_size, self.out = spec, seed, f_size, out
        self.cfg = spec.train.with_overrides(seed=seed)
        self.results: dict = {}
        self.extra: dict = {}
        self.logs: dict = {}

    @property
    def tag(self) -> str:
        return f"seed{self.seed}_f{self.f_size}"

    def _save(self, name, params, kind, extra=None):
        if self.out is not None and self.spec.save_checkpoints:
            save_model(self.out / "checkpoints" / self.tag / name, params, self.spec.arch, kind,
                       {"seed": self.seed, "f_size": self.f_size, **(extra or {})})

    def _score(self, name, kind, params, test):
        self.results[name] = evaluate(kind, params, self.spec.arch, test).miou

    def run(self) -> dict:
        spec, arch, cfg = self.spec, self.spec.arch, self.cfg
        data = generate_dataset(spec.scene, spec.num_images, self.seed)
        test = generate_dataset(spec.scene, spec.num_test, 10_000 + self.seed, prefix="test")
        split = split_dataset(data, self.f_size, self.seed)
        F, W = split.fully, split.weak

        theta, self.logs["ancillary"] = train_ancillary(F, arch, cfg)
        self._save("ancillary", theta, "ancillary")
        self._score("ancillary", "ancillary", theta, test)

        for v in spec.variants:
            if v == "f-only":
                phi, _, self.logs[v] = train_primary(Strategy.NONE, F, [], None, arch, cfg)
            elif v in ("none", "linear", "em-fixed"):
                phi, _, self.logs[v] = train_primary(v, F, W, theta, arch, cfg)
            elif v == "noisy-labels":
                truth = {s.id: s.mask for s in data}
                noisy = np.stack([inject_label_noise(truth[s.id], spec.noise_rate, [self.seed, i])
                                  for i, s in enumerate(W)]) if W else None
                phi, _, self.logs[v] = train_primary(Strategy.NONE, F, W, None, arch, cfg, W_hard_labels=noisy)
            elif v == "conv":
                phi = self._run_conv(F, W, test)
            else:  # pragma: no cover - rejected by ExperimentSpec.from_dict
                raise ValueError(v)
            self._save(v, phi, "primary", {"variant": v})
            self._score(v, "primary", phi, test)
        return self.results

    def _run_conv(self, F, W, test):
        arch = self.spec.arch
        proto = ConvProtocol(F, W, arch, self.cfg)
        proto.stage1()
        proto.stage2()
        _, half_b = split_half(F, self.cfg.seed)
        self.extra["qconv_heldout_init"] = heldout_qconv(proto.phi, proto.theta, proto.lam_init, arch, test)
        self.extra["qconv_heldout_stage2"] = heldout_qconv(proto.phi, proto.theta, proto.lam, arch, test)
        self.extra["qconv_half_b_init"] = heldout_qconv(proto.phi, proto.theta, proto.lam_init, arch, half_b)
        self.extra["qconv_half_b_stage2"] = heldout_qconv(proto.phi, proto.theta, proto.lam, arch, half_b)
        self.extra["conv_stage2_miou"] = evaluate("primary", proto.phi, arch, test).miou
        self._save("conv-stage2", proto.phi, "primary", {"variant": "conv-stage2"})
        proto.stage3()
        self._save("conv-head", proto.lam, "selfcorr-head")
        self._save("conv-ancillary", proto.theta, "ancillary")
        self.logs.update({f"conv-{k}": r for k, r in proto.reports.items()})
        return proto.phi


def _median(values):
    vals = [v for v in values if v is not None]
    return statistics.median(vals) if vals else None


def summarize(cells: list, spec: ExperimentSpec) -> dict:
    rows = [r for r in ROW_ORDER if r == "ancillary" or r in spec.variants]
    table = {}
    for r in rows:
        table[r] = {}
        for f in spec.f_sizes:
            vals = [c["miou"].get(r) for c in cells if c["f_size"] == f and "miou" in c]
            table[r][str(f)] = _median(vals)
    return {"rows": rows, "columns": [str(f) for f in spec.f_sizes], "median_miou": table}


def format_table(summary: dict) -> str:
    cols = summary["columns"]
    lines = ["| variant | " + " | ".join(f"F={c}" for c in cols) + " |",
             "|---|" + "---|" * len(cols)]
    for r in summary["rows"]:
        vals = summary["median_miou"][r]
        cells = ["n/a" if vals[c] is None else f"{vals[c]:.4f}" for c in cols]
        lines.append(f"| {r} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def run_experiment(spec: ExperimentSpec, out=None) -> dict:
    """Run every (seed, F size) cell; write report.json and table.md under ``out``."""
    out = Path(out) if out is not None else None
    if out is not None:
        (out / "logs").mkdir(parents=True, exist_ok=True)
    cells = []
    for f in spec.f_sizes:
        for seed in spec.seeds:
            runner = CellRunner(spec, seed, f, out)
            cell = {"seed": seed, "f_size": f}
            try:
                cell["miou"] = runner.run()
                cell.update(runner.extra)
            except Exception as exc:  # a failed cell does not stop the grid
                log.error("cell %s failed: %s", runner.tag, exc)
                cell["miou"] = dict(runner.results)
                cell["error"] = {"type": type(exc).__name__, "message": str(exc),
                                 "trace": traceback.format_exc().splitlines()[-3:]}
            if out is not None:
                for name, rep in runner.logs.items():
                    rep.write_jsonl(out / "logs" / f"{runner.tag}_{name}.jsonl")
            cells.append(cell)
            log.info("cell %s: %s", runner.tag, cell.get("miou"))
    report = {"spec": spec.to_dict(), "cells": cells, "summary": summarize(cells, spec)}
    if out is not None:
        (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
        (out / "table.md").write_text(format_table(report["summary"]))
    return report
