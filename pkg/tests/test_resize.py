import numpy as np
import pytest

from segfuse.metrics import ConfusionMatrix, accumulate, iou_scores
from segfuse.resize import ResizePolicy, plan_size, resize_label, resize_rgb, resize_sample


@pytest.fixture
def rng():
    return np.random.default_rng(11)


class TestPlanSize:
    def test_original_size_unchanged(self):
        policy = ResizePolicy("original_size")
        assert plan_size(policy, 347, 1241) == (347, 1241)

    def test_same_width_rellis_row(self):
        policy = ResizePolicy("same_width", target_w=2048)
        assert plan_size(policy, 1200, 1920) == (1280, 2048)

    def test_same_width_kitti_override(self):
        policy = ResizePolicy("same_width", target_w=2048)
        assert plan_size(policy, 347, 1241, dataset="kitti") == (622, 2048)
        # pure ratio scaling differs from the published table value
        assert plan_size(policy, 347, 1241) == (572, 2048)

    def test_size_warping(self):
        policy = ResizePolicy("size_warping", target_h=1024, target_w=2048)
        assert plan_size(policy, 347, 1241) == (1024, 2048)

    def test_even_heights(self, rng):
        policy = ResizePolicy("same_width", target_w=512, overrides={})
        for _ in range(100):
            in_h = int(rng.integers(64, 3000))
            in_w = int(rng.integers(64, 3000))
            out_h, out_w = plan_size(policy, in_h, in_w)
            assert out_w == 512
            assert out_h % 2 == 0
            assert abs(out_h / out_w - in_h / in_w) <= 2.0 / out_w

    def test_bad_policy_rejected(self):
        with pytest.raises(ValueError, match="unknown resize policy"):
            ResizePolicy("stretch")
        with pytest.raises(ValueError, match="width"):
            ResizePolicy("same_width")


class TestResizeSample:
    def test_identity_size(self, rng):
        rgb = rng.integers(0, 255, size=(6, 8, 3)).astype(np.uint8)
        depth = rng.random(size=(6, 8))
        label = rng.integers(0, 5, size=(6, 8)).astype(np.uint8)
        out_rgb, out_depth, out_label = resize_sample(rgb, depth, label, (6, 8))
        np.testing.assert_array_equal(out_rgb, rgb.astype(np.float64))
        np.testing.assert_array_equal(out_depth, depth)
        np.testing.assert_array_equal(out_label, label)
        assert out_label.dtype == np.uint8

    def test_label_values_closed_under_resize(self, rng):
        for _ in range(100):
            h, w = int(rng.integers(2, 12)), int(rng.integers(2, 12))
            label = rng.integers(0, 6, size=(h, w)).astype(np.uint8)
            oh, ow = int(rng.integers(1, 24)), int(rng.integers(1, 24))
            out = resize_label(label, oh, ow)
            assert set(np.unique(out)) <= set(np.unique(label))

    def test_constant_rgb_any_size(self):
        rgb = np.full((4, 4, 3), 37.0)
        out = resize_rgb(rgb, 9, 13)
        np.testing.assert_allclose(out, 37.0, rtol=0, atol=1e-12)

    def test_modality_mismatch_rejected(self, rng):
        with pytest.raises(ValueError, match="mismatch"):
            resize_sample(np.zeros((4, 4, 3)), np.zeros((4, 5)), np.zeros((4, 4)), (2, 2))


def test_warped_iou_consistency_on_blocks(rng):
    # integer-factor warping duplicates every pixel equally, so IoU on
    # identically warped pred/gt matches IoU of the originals exactly
    for _ in range(10):
        gt = np.repeat(np.repeat(rng.integers(0, 3, size=(4, 4)), 8, axis=0), 8, axis=1)
        pred = np.repeat(np.repeat(rng.integers(0, 3, size=(4, 4)), 8, axis=0), 8, axis=1)
        base = iou_scores(accumulate(ConfusionMatrix(3), pred, gt))
        wp = resize_label(pred.astype(np.uint8), 64, 64)
        wg = resize_label(gt.astype(np.uint8), 64, 64)
        warped = iou_scores(accumulate(ConfusionMatrix(3), wp, wg))
        assert base.per_class_iou == warped.per_class_iou
