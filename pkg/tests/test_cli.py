import json

import numpy as np
import pytest

from selfcorr.cli import main
from selfcorr.distributions import fuse_linear
from selfcorr.tensor.container import load_tensor, save_tensor

SCENE = {"height": 16, "width": 16, "min_size": 3, "max_size": 5}
ARCH = {"widths": [4, 6, 6], "coarse_tap": 2, "decoder_width": 6, "head_width": 6}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps({"scene": SCENE, "num_images": 12, "num_test": 4, "arch": ARCH,
                               "train": {"steps": 3, "batch_size": 4, "pretrain_steps": 2}}))
    assert main(["gen-data", "--config", str(cfg), "--out", str(root / "data"), "--seed", "1"]) == 0
    assert main(["split", "--data", str(root / "data"), "--f-size", "4", "--seed", "0"]) == 0
    assert main(["train-ancillary", "--data", str(root / "data"), "--use-half-f", "--out", str(root / "anc"),
                 "--config", str(cfg)]) == 0
    return root, cfg


def test_split_removes_weak_masks(workspace):
    from selfcorr.data import read_split
    root, _ = workspace
    split, test, _ = read_split(root / "data")
    assert len(split.fully) == 4 and len(split.weak) == 8 and len(test) == 4
    assert all(s.mask is None for s in split.weak)
    assert all(s.mask is not None for s in split.fully)


@pytest.mark.parametrize("strategy", ["none", "linear", "conv"])
def test_train_and_eval(workspace, capsys, tmp_path, strategy):
    root, cfg = workspace
    ck = tmp_path / strategy
    code, out, _ = run(capsys, "train", "--strategy", strategy, "--data", root / "data", "--ancillary", root / "anc",
                       "--out", ck, "--config", cfg, "--alpha-start", 10, "--alpha-end", 1)
    assert code == 0 and json.loads(out)["strategy"] == strategy
    log = [json.loads(s) for s in (ck / "train_log.jsonl").read_text().splitlines()]
    assert "wall_clock_s" in log[-1]
    if strategy == "conv":
        assert (ck / "selfcorr_head").is_dir()
    else:
        assert not (ck / "selfcorr_head").exists()
    code, out, _ = run(capsys, "eval", "--model", "primary", "--ckpt", ck, "--data", root / "data",
                       "--dump-masks", tmp_path / "masks")
    rep = json.loads(out)
    assert code == 0 and 0 <= rep["miou"] <= 1
    assert len(list((tmp_path / "masks").glob("*.stns"))) == 4


def test_config_flag_overrides(workspace, capsys, tmp_path):
    root, cfg = workspace
    code, _, _ = run(capsys, "train", "--strategy", "none", "--data", root / "data", "--ancillary", root / "anc",
                     "--out", tmp_path / "p", "--config", cfg, "--steps", 5)
    assert code == 0
    lines = (tmp_path / "p" / "train_log.jsonl").read_text().splitlines()
    assert len(lines) == 5 + 1


def test_eval_ancillary(workspace, capsys):
    root, _ = workspace
    code, out, _ = run(capsys, "eval", "--model", "ancillary", "--ckpt", root / "anc", "--data", root / "data")
    assert code == 0 and "per_class_iou" in json.loads(out)


def test_eval_kind_mismatch(workspace, capsys):
    root, _ = workspace
    code, out, err = run(capsys, "eval", "--model", "primary", "--ckpt", root / "anc", "--data", root / "data")
    assert code == 2 and out == ""
    assert json.loads(err)["error"]["type"] == "CliError"


def test_split_twice_fails(workspace, capsys):
    root, _ = workspace
    code, _, err = run(capsys, "split", "--data", root / "data", "--f-size", "4", "--seed", "0")
    assert code == 2 and "error" in json.loads(err)


def test_missing_checkpoint(workspace, capsys, tmp_path):
    root, _ = workspace
    code, _, err = run(capsys, "eval", "--model", "primary", "--ckpt", tmp_path / "nope", "--data", root / "data")
    assert code != 0 and "message" in json.loads(err)["error"]


def test_bad_config_json(capsys, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    code, _, err = run(capsys, "gen-data", "--config", bad, "--out", tmp_path / "d", "--seed", "0")
    assert code == 2 and "not valid JSON" in json.loads(err)["error"]["message"]


def test_fuse(capsys, tmp_path):
    rng = np.random.default_rng(0)
    l, la = rng.normal(size=(3, 4, 5)), rng.normal(size=(3, 4, 5))
    save_tensor(tmp_path / "l.stns", l)
    save_tensor(tmp_path / "la.stns", la)
    code, _, _ = run(capsys, "fuse", "--primary-logits", tmp_path / "l.stns", "--ancillary-logits",
                     tmp_path / "la.stns", "--alpha", 2.0, "--out", tmp_path / "f.stns")
    assert code == 0
    np.testing.assert_allclose(load_tensor(tmp_path / "f.stns"), (l + 2 * la) / 3, atol=1e-12)
    np.testing.assert_allclose(load_tensor(tmp_path / "f.stns"), fuse_linear(l, la, 2.0), atol=0)


def test_fuse_shape_mismatch(capsys, tmp_path):
    save_tensor(tmp_path / "a.stns", np.zeros((3, 2, 2)))
    save_tensor(tmp_path / "b.stns", np.zeros((3, 2, 3)))
    code, _, err = run(capsys, "fuse", "--primary-logits", tmp_path / "a.stns", "--ancillary-logits",
                       tmp_path / "b.stns", "--alpha", 1, "--out", tmp_path / "f.stns")
    assert code == 2 and json.loads(err)["error"]


def test_grad_check_single_op(capsys):
    code, out, _ = run(capsys, "grad-check", "--ops", "conv2d", "--seed", 0)
    rep = json.loads(out)
    assert code == 0 and rep["passed"] and rep["checks"][0]["op"] == "conv2d"


def test_grad_check_unknown_op(capsys):
    code, _, err = run(capsys, "grad-check", "--ops", "nope", "--seed", 0)
    assert code == 2 and json.loads(err)["error"]["type"] == "KeyError"


def test_experiment_command(capsys, tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"scene": SCENE, "arch": ARCH, "train": {"steps": 2, "batch_size": 4,
                                                                        "pretrain_steps": 2},
                                "num_images": 10, "num_test": 3, "f_sizes": [4], "seeds": [0],
                                "variants": ["f-only", "none", "linear", "conv"]}))
    code, out, err = run(capsys, "experiment", "--spec", spec, "--out", tmp_path / "exp")
    assert code == 0 and json.loads(out)["failed_cells"] == 0
    assert "| ancillary |" in err
    assert (tmp_path / "exp" / "report.json").is_file() and (tmp_path / "exp" / "table.md").is_file()


def test_unknown_spec_key(capsys, tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"bogus": 1}))
    code, _, err = run(capsys, "experiment", "--spec", spec, "--out", tmp_path / "exp")
    assert code == 2 and "bogus" in json.loads(err)["error"]["message"]
