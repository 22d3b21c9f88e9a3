import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from selfcorr.distributions import fuse_linear
from selfcorr.models import (
    ArchConfig,
    BoxAnnotation,
    ParamSet,
    ancillary_forward,
    attention_maps,
    averaging_head,
    boxes_to_mask,
    init_ancillary,
    init_primary,
    init_selfcorr_head,
    load_model,
    primary_forward,
    save_model,
    selfcorr_head_forward,
)
from selfcorr.tensor import ShapeError, Tensor

ARCH = ArchConfig(num_classes=3, height=16, width=16, widths=(4, 6, 8), fine_tap=0, coarse_tap=2,
                  decoder_width=6, head_width=16)


def rand_image(seed, n=None):
    rng = np.random.default_rng(seed)
    shape = (3, 16, 16) if n is None else (n, 3, 16, 16)
    return rng.uniform(0, 1, size=shape).astype(np.float32)


class TestBoxesToMask:
    def test_single_box(self):
        m = boxes_to_mask([BoxAnnotation(1, 1, 0, 3, 2)], 2, 3, 4)
        expect1 = np.array([[0, 1, 1, 0], [0, 1, 1, 0], [0, 0, 0, 0]])
        np.testing.assert_array_equal(m[1], expect1)
        np.testing.assert_array_equal(m[0], 1 - expect1)
        assert not m[2].any()

    def test_overlapping_union(self):
        # two class-1 boxes overlap; hand-drawn union
        boxes = [BoxAnnotation(1, 0, 0, 3, 2), BoxAnnotation(1, 2, 1, 5, 4)]
        union = np.array([
            [1, 1, 1, 0, 0],
            [1, 1, 1, 1, 1],
            [0, 0, 1, 1, 1],
            [0, 0, 1, 1, 1],
        ])
        m = boxes_to_mask(boxes, 1, 4, 5)
        np.testing.assert_array_equal(m[1], union)
        np.testing.assert_array_equal(m[0], 1 - union)

    def test_two_classes_both_marked(self):
        boxes = [BoxAnnotation(1, 0, 0, 2, 2), BoxAnnotation(2, 1, 1, 3, 3)]
        m = boxes_to_mask(boxes, 2, 3, 3)
        assert m[1, 1, 1] == 1 and m[2, 1, 1] == 1 and m[0, 1, 1] == 0

    def test_empty(self):
        m = boxes_to_mask([], 3, 2, 2)
        assert m[0].all() and not m[1:].any()

    @pytest.mark.parametrize("box", [BoxAnnotation(4, 0, 0, 1, 1), BoxAnnotation(0, 0, 0, 1, 1)])
    def test_bad_class(self, box):
        with pytest.raises(ValueError):
            boxes_to_mask([box], 3, 4, 4)

    @pytest.mark.parametrize("box", [BoxAnnotation(1, 0, 0, 5, 1), BoxAnnotation(1, 2, 0, 2, 1),
                                     BoxAnnotation(1, -1, 0, 1, 1)])
    def test_bad_bounds(self, box):
        with pytest.raises(ValueError):
            boxes_to_mask([box], 3, 4, 4)


class TestArchConfig:
    def test_divisibility(self):
        with pytest.raises(ValueError):
            ArchConfig(height=20, width=16, widths=(4, 4, 4))

    def test_taps(self):
        with pytest.raises(ValueError):
            ArchConfig(fine_tap=2, coarse_tap=1)

    def test_roundtrip(self):
        assert ArchConfig.from_dict(ARCH.to_dict()) == ARCH


class TestForward:
    def test_primary_dims(self):
        phi = init_primary(ARCH, 0)
        assert primary_forward(phi, ARCH, rand_image(0)).dims == (4, 16, 16)
        assert primary_forward(phi, ARCH, rand_image(0, 2)).dims == (2, 4, 16, 16)

    def test_ancillary_dims(self):
        theta = init_ancillary(ARCH, 0)
        bm = boxes_to_mask([BoxAnnotation(2, 3, 3, 9, 10)], 3, 16, 16)
        assert ancillary_forward(theta, ARCH, rand_image(1), bm).dims == (4, 16, 16)

    def test_head_dims(self):
        lam = init_selfcorr_head(ARCH, 0)
        l = np.zeros((2, 4, 16, 16))
        assert selfcorr_head_forward(lam, l, l).dims == (2, 4, 16, 16)

    def test_wrong_image_dims(self):
        phi = init_primary(ARCH, 0)
        with pytest.raises(ShapeError) as e:
            primary_forward(phi, ARCH, np.zeros((3, 16, 8)))
        assert e.value.axis == "W"
        with pytest.raises(ShapeError):
            primary_forward(phi, ARCH, np.zeros((2, 16, 16)))

    def test_head_dim_mismatch(self):
        lam = init_selfcorr_head(ARCH, 0)
        with pytest.raises(ShapeError):
            selfcorr_head_forward(lam, np.zeros((4, 16, 16)), np.zeros((4, 8, 16)))

    def test_deterministic(self):
        a = primary_forward(init_primary(ARCH, 3), ARCH, rand_image(2)).data
        b = primary_forward(init_primary(ARCH, 3), ARCH, rand_image(2)).data
        np.testing.assert_array_equal(a, b)

    def test_box_mask_changes_ancillary_output(self):
        theta = init_ancillary(ARCH, 0)
        img = rand_image(3)
        m1 = boxes_to_mask([BoxAnnotation(1, 2, 2, 8, 8)], 3, 16, 16)
        m2 = boxes_to_mask([BoxAnnotation(3, 6, 6, 14, 14)], 3, 16, 16)
        a = ancillary_forward(theta, ARCH, img, m1).data
        b = ancillary_forward(theta, ARCH, img, m2).data
        assert np.abs(a - b).max() > 1e-4

    def test_attention_in_unit_interval(self):
        theta = init_ancillary(ARCH, 0)
        bm = boxes_to_mask([BoxAnnotation(1, 0, 0, 5, 5)], 3, 16, 16)
        for tap, g in attention_maps(theta, ARCH, bm).items():
            assert g.dims[1:] == (ARCH.widths[tap],) + ARCH.tap_size(tap)
            assert np.all((g.data > 0) & (g.data < 1))

    def test_gradients_reach_all_params(self):
        theta = init_ancillary(ARCH, 0, dtype=np.float64)
        bm = boxes_to_mask([BoxAnnotation(1, 2, 2, 12, 12)], 3, 16, 16)
        out = ancillary_forward(theta, ARCH, rand_image(4).astype(np.float64), bm)
        from selfcorr.tensor import ops
        ops.sum(ops.mul(out, Tensor(np.random.default_rng(0).normal(size=out.dims)))).backward()
        assert all(p.grad is not None and np.abs(p.grad).sum() > 0 for p in theta.values())


class TestParams:
    def test_counts(self):
        phi, theta = init_primary(ARCH, 0), init_ancillary(ARCH, 0)
        # ancillary adds exactly one attention conv per tap
        extra = sum((ARCH.out_channels * 9 + 1) * ARCH.widths[t] for t in (ARCH.fine_tap, ARCH.coarse_tap))
        assert theta.num_params() == phi.num_params() + extra
        k = ARCH.out_channels
        assert init_selfcorr_head(ARCH, 0).num_params() == (2 * k * 9 + 1) * 16 + (16 * 9 + 1) * k

    def test_seeds_differ(self):
        a, b = init_primary(ARCH, 0), init_primary(ARCH, 1)
        assert not np.array_equal(a["enc0.w"].data, b["enc0.w"].data)

    def test_frozen(self):
        f = init_primary(ARCH, 0).frozen()
        assert not any(p.requires_grad for p in f.values())

    def test_save_load(self, tmp_path):
        theta = init_ancillary(ARCH, 5)
        save_model(tmp_path / "ck", theta, ARCH, "ancillary", {"seed": 5})
        back, arch, meta = load_model(tmp_path / "ck")
        assert arch == ARCH and meta["kind"] == "ancillary" and meta["seed"] == 5
        assert set(back) == set(theta)
        for k in theta:
            np.testing.assert_array_equal(back[k].data, theta[k].data)
            assert back[k].data.dtype == theta[k].data.dtype


class TestAveragingHead:
    def test_matches_linear_fusion_alpha_one(self):
        rng = np.random.default_rng(0)
        l, la = rng.normal(size=(2, 4, 16, 16)) * 3, rng.normal(size=(2, 4, 16, 16)) * 3
        out = selfcorr_head_forward(averaging_head(ARCH), l, la).data
        np.testing.assert_allclose(out, fuse_linear(l, la, 1.0), atol=1e-6)

    def test_too_narrow(self):
        with pytest.raises(ValueError):
            averaging_head(ArchConfig(num_classes=3, height=16, width=16, widths=(4, 6, 8), coarse_tap=2,
                                      head_width=8))

    def test_is_paramset(self):
        assert isinstance(averaging_head(ARCH), ParamSet)


@pytest.mark.slow
def test_primary_overfits_one_image():
    from selfcorr.data import SceneConfig, generate_dataset
    from selfcorr.evaluation import predict
    from selfcorr.training import TrainConfig, train_primary
    scene = SceneConfig(height=32, width=32, min_size=4, max_size=9, color_jitter=0.05)
    arch = ArchConfig(height=32, width=32, widths=(16, 32, 48, 64))
    one = generate_dataset(scene, 1, 3)
    phi, _, _ = train_primary("none", one, [], None, arch,
                              TrainConfig(steps=500, lr=0.03, batch_size=1, grad_clip=5.0))
    assert (predict("primary", phi, arch, one)[0] == one[0].mask).mean() >= 0.99


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from(["zeros", "ones", "uniform"]))
def test_forwards_finite_on_unit_range(seed, kind):
    rng = np.random.default_rng(seed)
    img = {"zeros": np.zeros, "ones": np.ones}.get(kind, lambda s: rng.uniform(0, 1, s))((2, 3, 16, 16))
    bm = np.stack([boxes_to_mask([BoxAnnotation(int(rng.integers(1, 4)), 2, 3, 9, 12)], 3, 16, 16)] * 2)
    l = primary_forward(init_primary(ARCH, seed % 97), ARCH, img.astype(np.float32)).data
    la = ancillary_forward(init_ancillary(ARCH, seed % 89), ARCH, img.astype(np.float32), bm).data
    h = selfcorr_head_forward(init_selfcorr_head(ARCH, seed % 83), l, la).data
    assert np.isfinite(l).all() and np.isfinite(la).all() and np.isfinite(h).all()
