"""Command-line entry point: ``selfcorr <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import distributions as D
from .data import SceneConfig, generate_dataset, read_dataset, read_split, split_dataset, split_half, write_dataset, write_split
from .evaluation import evaluate
from .experiment import ExperimentSpec, format_table, run_experiment
from .gradsuite import CHECKS, run_checks
from .models import ArchConfig, load_model, save_model
from .selfcorrect import Strategy
from .tensor.container import ContainerError, load_tensor, save_tensor
from .training import StageOrderError, TrainConfig, TrainReport, pretrain_selfcorr, train_ancillary, train_primary

log = logging.getLogger("selfcorr")


class CliError(Exception):
    """Expected failure with a short message; exits with code 2."""


def _load_json(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise CliError(f"config file {path} is not valid JSON: {e}")


def _arch_from(config: dict, meta: dict) -> ArchConfig:
    scene = meta.get("scene", {})
    d = dict(config.get("arch", {}))
    for k in ("height", "width", "num_classes"):
        if k in scene:
            d.setdefault(k, scene[k])
    return ArchConfig.from_dict(d)


def _train_config(config: dict, **overrides) -> TrainConfig:
    return TrainConfig.from_dict(config.get("train", {})).with_overrides(**overrides)


def _require_split(data_dir):
    split, test, meta = read_split(data_dir)
    if not split.fully and not split.weak:
        raise CliError(f"{data_dir} has no fully/weak split; run the split command first")
    return split, test, meta


# ------------------------------------------------------------------ commands

def cmd_gen_data(args):
    config = _load_json(args.config)
    scene = SceneConfig(**config.get("scene", {}))
    n_train = int(config.get("num_images", 2000))
    n_test = int(config.get("num_test", 300))
    train = generate_dataset(scene, n_train, args.seed)
    test = generate_dataset(scene, n_test, 10_000 + args.seed, prefix="test")
    write_dataset(args.out, {"train": train, "test": test}, {"scene": scene.to_dict(), "seed": args.seed})
    return {"out": str(args.out), "train": n_train, "test": n_test}


def cmd_split(args):
    groups, meta = read_dataset(args.data)
    if "train" not in groups:
        raise CliError(f"{args.data} has no unsplit 'train' samples (already split?)")
    sp = split_dataset(groups["train"], args.f_size, args.seed)
    for s in sp.weak:  # weak samples lose their masks on disk too
        (Path(args.data) / "masks" / f"{s.id}.stns").unlink(missing_ok=True)
    write_split(args.data, sp, test=groups.get("test"), meta=meta)
    return {"fully": len(sp.fully), "weak": len(sp.weak), "test": len(groups.get("test", []))}


def cmd_train_ancillary(args):
    config = _load_json(args.config)
    split, _, meta = _require_split(args.data)
    arch = _arch_from(config, meta)
    cfg = _train_config(config, seed=args.seed, steps=args.steps)
    F = split.fully
    if args.use_half_f:
        F, _ = split_half(F, cfg.seed)
    theta, report = train_ancillary(F, arch, cfg)
    save_model(args.out, theta, arch, "ancillary", {"train": cfg.to_dict(), "num_fully": len(F),
                                                    "half_f": bool(args.use_half_f)})
    report.checkpoints.append(str(args.out))
    report.write_jsonl(Path(args.out) / "train_log.jsonl")
    return {"out": str(args.out), "samples": len(F), "final_loss": report.records[-1]["loss"]}


def cmd_train(args):
    config = _load_json(args.config)
    split, _, meta = _require_split(args.data)
    strategy = Strategy.parse(args.strategy)
    theta, arch_anc, _ = load_model(args.ancillary)
    arch = _arch_from(config, meta) if config.get("arch") else arch_anc
    cfg = _train_config(config, seed=args.seed, steps=args.steps, alpha_start=args.alpha_start,
                        alpha_end=args.alpha_end, strategy=strategy.value,
                        clamp_outside_boxes=True if args.clamp_outside_boxes else None)
    report = TrainReport(f"primary-{strategy.value}")
    phi = lam = None
    if strategy is Strategy.CONV:
        phi, lam, _ = pretrain_selfcorr(split.fully, theta, arch, cfg, report=report)
    phi, lam, report = train_primary(strategy, split.fully, split.weak, theta, arch, cfg, lam=lam, phi=phi,
                                     report=report)
    extra = {"train": cfg.to_dict(), "strategy": strategy.value}
    save_model(args.out, phi, arch, "primary", extra)
    report.checkpoints.append(str(args.out))
    if lam is not None:
        save_model(Path(args.out) / "selfcorr_head", lam, arch, "selfcorr-head", extra)
        report.checkpoints.append(str(Path(args.out) / "selfcorr_head"))
    report.write_jsonl(Path(args.out) / "train_log.jsonl")
    return {"out": str(args.out), "strategy": strategy.value, "final_loss": report.records[-1]["loss"]}


def cmd_eval(args):
    params, arch, meta = load_model(args.ckpt)
    if meta.get("kind") != args.model:
        raise CliError(f"checkpoint holds a {meta.get('kind')} model, not {args.model}")
    groups, _ = read_dataset(args.data)
    if args.split not in groups:
        raise CliError(f"no '{args.split}' samples in {args.data}; available: {sorted(groups)}")
    rep = evaluate(args.model, params, arch, groups[args.split], clamp=args.clamp_outside_boxes,
                   dump_masks=args.dump_masks)
    return rep.to_dict()


def cmd_fuse(args):
    l = load_tensor(args.primary_logits)
    la = load_tensor(args.ancillary_logits)
    if l.shape != la.shape:
        raise CliError(f"logit dims differ: {l.shape} vs {la.shape}")
    fused = D.fuse_linear(l.astype(np.float64), la.astype(np.float64), args.alpha).astype(l.dtype)
    save_tensor(args.out, fused)
    return {"out": str(args.out), "dims": list(fused.shape)}


def cmd_grad_check(args):
    results = run_checks(args.ops, seed=args.seed)
    out = {"passed": all(bool(r.passed) for r in results),
           "checks": [{"op": r.name, "max_rel_error": float(r.max_rel_error), "coords": int(r.n_coords),
                       "passed": bool(r.passed)} for r in results]}
    if not out["passed"]:
        failed = [c["op"] for c in out["checks"] if not c["passed"]]
        raise CliError(f"gradient check failed for {failed}", out)
    return out


def cmd_experiment(args):
    spec = ExperimentSpec.from_dict(_load_json(args.spec))
    report = run_experiment(spec, args.out)
    sys.stderr.write(format_table(report["summary"]))
    return {"out": str(args.out), "cells": len(report["cells"]),
            "failed_cells": sum("error" in c for c in report["cells"])}


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="selfcorr", description="Self-correcting weakly supervised segmentation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="generate a synthetic train/test dataset")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("split", help="split train samples into fully/weak sets (in place)")
    s.add_argument("--data", required=True, type=Path)
    s.add_argument("--f-size", required=True, type=int)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("train-ancillary", help="train the box-conditioned model on the fully set")
    s.add_argument("--data", required=True, type=Path)
    s.add_argument("--use-half-f", action="store_true", help="train on one seeded half of the fully set")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--steps", type=int)
    s.set_defaults(func=cmd_train_ancillary)

    s = sub.add_parser("train", help="train the image-only model")
    s.add_argument("--strategy", required=True, choices=[x.value for x in Strategy])
    s.add_argument("--data", required=True, type=Path)
    s.add_argument("--ancillary", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--alpha-start", type=float)
    s.add_argument("--alpha-end", type=float)
    s.add_argument("--clamp-outside-boxes", action="store_true")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--steps", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="mIOU of a checkpoint on a dataset split")
    s.add_argument("--model", required=True, choices=["primary", "ancillary"])
    s.add_argument("--ckpt", required=True, type=Path)
    s.add_argument("--data", required=True, type=Path)
    s.add_argument("--split", default="test")
    s.add_argument("--dump-masks", type=Path)
    s.add_argument("--clamp-outside-boxes", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("fuse", help="linear fusion of two logit containers")
    s.add_argument("--primary-logits", required=True, type=Path)
    s.add_argument("--ancillary-logits", required=True, type=Path)
    s.add_argument("--alpha", required=True, type=float)
    s.add_argument("--out", required=True, type=Path)
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("grad-check", help="finite-difference checks of ops and losses")
    s.add_argument("--ops", default="all", help=f"'all' or one of: {', '.join(CHECKS)}")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_grad_check)

    s = sub.add_parser("experiment", help="run a strategy x F-size grid from a JSON spec")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True, type=Path)
    s.set_defaults(func=cmd_experiment)
    return p


def _error(kind: str, message: str, detail=None) -> dict:
    err = {"error": {"type": kind, "message": message}}
    if detail is not None:
        err["error"]["detail"] = detail
    return err


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = args.func(args)
    except CliError as e:
        detail = e.args[1] if len(e.args) > 1 else None
        print(json.dumps(_error("CliError", e.args[0], detail), sort_keys=True), file=sys.stderr)
        return 2
    except (ValueError, KeyError, FileNotFoundError, ContainerError, StageOrderError) as e:
        print(json.dumps(_error(type(e).__name__, str(e).strip("'\"")), sort_keys=True), file=sys.stderr)
        return 2
    except Exception as e:  # unexpected: still report in structured form
        log.debug("unhandled error", exc_info=True)
        print(json.dumps(_error(type(e).__name__, str(e)), sort_keys=True), file=sys.stderr)
        return 1
    print(json.dumps(result, indent=1, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
