import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from camseed.fusion import (
    FusionConfig,
    binarize,
    entropy_weight,
    fuse_um_cam,
    grad_cam,
    grid_search_threshold,
    normalize_max,
    upsample_bilinear,
)
from camseed.gridio import FeatureBlockExport
from camseed.metrics import dsc


def grad_cam_oracle(features, gradients):
    """Scalar double-loop rendition of the channel-weighting definition."""
    k, h, w = features.shape
    n = h * w
    cam = np.zeros((h, w))
    for ki in range(k):
        alpha = 0.0
        for r in range(h):
            for c in range(w):
                alpha += gradients[ki, r, c]
        alpha /= n
        for r in range(h):
            for c in range(w):
                cam[r, c] += alpha * features[ki, r, c]
    return np.maximum(cam, 0.0)


class TestGradCam:
    def test_unit_gradient_passes_features(self):
        f = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        export = FeatureBlockExport(0, f, np.ones_like(f))
        assert np.array_equal(grad_cam(export), f[0])

    def test_negative_weight_clamped(self):
        f = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        export = FeatureBlockExport(0, f, -np.ones_like(f))
        assert np.array_equal(grad_cam(export), np.zeros((2, 2)))

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            f = rng.standard_normal((2, 4, 4))
            g = rng.standard_normal((2, 4, 4))
            got = grad_cam(FeatureBlockExport(0, f, g))
            assert np.allclose(got, grad_cam_oracle(f, g), atol=1e-12, rtol=0)

    def test_output_non_negative(self):
        rng = np.random.default_rng(8)
        f = rng.standard_normal((5, 6, 6))
        g = rng.standard_normal((5, 6, 6))
        assert (grad_cam(FeatureBlockExport(1, f, g)) >= 0).all()


class TestUpsample:
    def test_same_size_is_identity(self):
        m = np.random.default_rng(0).random((5, 7))
        assert np.array_equal(upsample_bilinear(m, 5, 7), m)

    def test_constant_preserved(self):
        m = np.full((3, 3), 0.4)
        out = upsample_bilinear(m, 10, 17)
        assert np.allclose(out, 0.4, atol=1e-15)

    def test_two_by_two_to_two_by_four(self):
        # hand evaluation of the pixel-center formula: source col for
        # target c is (c+0.5)*2/4-0.5 = {-0.25, 0.25, 0.75, 1.25}, clamped
        # to [0,1] -> fractions {0, 0.25, 0.75, 1} between columns 0 and 1
        m = np.array([[0.0, 1.0], [0.0, 1.0]])
        out = upsample_bilinear(m, 2, 4)
        expected = np.array([[0.0, 0.25, 0.75, 1.0]] * 2)
        assert np.allclose(out, expected, atol=1e-15)
        assert (np.diff(out, axis=1) >= 0).all()
        assert np.allclose(out[0], out[1])

    def test_no_overshoot(self):
        rng = np.random.default_rng(1)
        m = rng.random((4, 5))
        out = upsample_bilinear(m, 13, 11)
        assert out.min() >= m.min() - 1e-15
        assert out.max() <= m.max() + 1e-15

    def test_downsample_also_allowed(self):
        m = np.random.default_rng(2).random((8, 8))
        assert upsample_bilinear(m, 3, 3).shape == (3, 3)

    def test_bad_target_rejected(self):
        with pytest.raises(ValueError):
            upsample_bilinear(np.zeros((2, 2)), 0, 3)


class TestNormalizeMax:
    def test_direct_division(self):
        m = np.array([[0.0, 2.0], [4.0, 8.0]])
        assert np.array_equal(normalize_max(m), np.array([[0.0, 0.25], [0.5, 1.0]]))

    def test_all_zero_unchanged(self):
        m = np.zeros((3, 3))
        assert np.array_equal(normalize_max(m), m)

    def test_max_becomes_one(self):
        m = np.random.default_rng(3).random((6, 6)) + 0.1
        assert normalize_max(m).max() == 1.0

    def test_negative_rejected(self):
        with pytest.raises(ValueError, match="non-negative"):
            normalize_max(np.array([[-0.1, 1.0]]))


class TestEntropyWeight:
    def test_half_is_zero(self):
        assert entropy_weight(np.array([0.5]))[0] == pytest.approx(0.0, abs=1e-12)

    def test_certain_is_one(self):
        w = entropy_weight(np.array([0.0, 1.0]))
        assert w[0] == pytest.approx(1.0, abs=1e-12)
        assert w[1] == pytest.approx(1.0, abs=1e-12)

    def test_quarter_value(self):
        # 1 - H(0.25) with H = -p log2 p - (1-p) log2 (1-p)
        expected = 1.0 - (-(0.25 * math.log2(0.25) + 0.75 * math.log2(0.75)))
        got = entropy_weight(np.array([0.25]))[0]
        assert got == pytest.approx(expected, abs=1e-12)
        assert got == pytest.approx(0.18872, abs=5e-6)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0.0, 1.0, allow_nan=False))
    def test_symmetry(self, p):
        w1 = entropy_weight(np.array([p]))[0]
        w2 = entropy_weight(np.array([1.0 - p]))[0]
        assert w1 == pytest.approx(w2, abs=1e-12)

    def test_range(self):
        p = np.linspace(0, 1, 1001)
        w = entropy_weight(p)
        assert (w >= 0).all() and (w <= 1).all()

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            entropy_weight(np.array([1.1]))


class TestFuseUmCam:
    def test_certain_disagreement_averages(self):
        stack = [np.array([[1.0]]), np.array([[0.0]])]
        out = fuse_um_cam(stack, FusionConfig(max_block_index=1))
        assert out[0, 0] == pytest.approx(0.5)

    def test_agreement_is_identity_all_modes(self):
        stack = [np.full((2, 2), 0.3)] * 3
        for mode in ("um_cam", "average_cam", "last_layer_only"):
            out = fuse_um_cam(stack, FusionConfig(max_block_index=2, fusion_mode=mode))
            assert np.allclose(out, 0.3)

    def test_uncertain_map_fully_discounted(self):
        # weights: w(0.9) > 0, w(0.5) = 0, so the 0.5 map drops out
        stack = [np.array([[0.9]]), np.array([[0.5]])]
        out = fuse_um_cam(stack, FusionConfig(max_block_index=1))
        assert out[0, 0] == pytest.approx(0.9, abs=1e-12)

    def test_all_maps_at_half_fall_back_to_mean(self):
        stack = [np.array([[0.5]]), np.array([[0.5]])]
        out = fuse_um_cam(stack, FusionConfig(max_block_index=1))
        assert out[0, 0] == pytest.approx(0.5)

    def test_single_map_identity_all_modes(self):
        m = np.random.default_rng(4).random((5, 5))
        for mode in ("um_cam", "average_cam", "last_layer_only"):
            out = fuse_um_cam([m], FusionConfig(max_block_index=0, fusion_mode=mode))
            assert np.allclose(out, m, atol=1e-15)

    def test_convex_combination_bounds(self):
        rng = np.random.default_rng(5)
        stack = [rng.random((8, 8)) for _ in range(4)]
        out = fuse_um_cam(stack, FusionConfig(max_block_index=3))
        lo = np.min(stack, axis=0)
        hi = np.max(stack, axis=0)
        assert (out >= lo - 1e-12).all() and (out <= hi + 1e-12).all()

    def test_equal_weights_match_average(self):
        # maps valued v or 1-v per pixel share the same entropy weight
        rng = np.random.default_rng(6)
        v = rng.random((6, 6))
        stack = [np.where(rng.random((6, 6)) < 0.5, v, 1.0 - v) for _ in range(3)]
        cfg_um = FusionConfig(max_block_index=2, fusion_mode="um_cam")
        cfg_avg = FusionConfig(max_block_index=2, fusion_mode="average_cam")
        assert np.allclose(fuse_um_cam(stack, cfg_um), fuse_um_cam(stack, cfg_avg), atol=1e-9)

    def test_last_layer_only_returns_final_map(self):
        stack = [np.zeros((2, 2)), np.full((2, 2), 0.7)]
        cfg = FusionConfig(max_block_index=1, fusion_mode="last_layer_only")
        assert np.allclose(fuse_um_cam(stack, cfg), 0.7)

    def test_stack_size_checked(self):
        with pytest.raises(ValueError, match="expects"):
            fuse_um_cam([np.zeros((2, 2))], FusionConfig(max_block_index=4))

    def test_empty_stack_rejected(self):
        with pytest.raises(ValueError):
            fuse_um_cam([], FusionConfig(max_block_index=0))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shape"):
            fuse_um_cam(
                [np.zeros((2, 2)), np.zeros((3, 2))], FusionConfig(max_block_index=1)
            )


class TestBinarize:
    def test_strict_inequality_at_zero(self):
        m = np.array([[0.0, 0.5]])
        assert np.array_equal(binarize(m, 0.0), np.array([[0, 1]], dtype=np.uint8))

    def test_threshold_one_empty(self):
        m = np.array([[0.3, 1.0]])
        assert binarize(m, 1.0).sum() == 0

    def test_midpoint(self):
        assert np.array_equal(binarize(np.array([[0.4, 0.6]]), 0.5), np.array([[0, 1]]))

    def test_bad_threshold(self):
        with pytest.raises(ValueError):
            binarize(np.zeros((1, 1)), 1.5)


def exhaustive_best_threshold(maps, truths):
    """Independent enumeration over the same grid."""
    best = (0.0, -1.0)
    for t in range(100):
        threshold = t / 100.0
        scores = []
        for m, gt in zip(maps, truths):
            pred = (m > threshold).astype(np.uint8)
            scores.append(dsc(pred, gt))
        mean = float(np.mean(scores))
        if mean > best[1]:
            best = (threshold, mean)
    return best


class TestGridSearch:
    def test_two_level_map_tie_break(self):
        truth = np.zeros((10, 10), dtype=np.uint8)
        truth[3:7, 3:7] = 1
        m = np.where(truth == 1, 0.8, 0.2)
        threshold, score = grid_search_threshold([m], [truth])
        assert score == pytest.approx(1.0)
        assert threshold == pytest.approx(0.20)  # smallest optimal threshold

    def test_perfect_binary_map(self):
        truth = np.zeros((6, 6), dtype=np.uint8)
        truth[1:3, 1:4] = 1
        threshold, score = grid_search_threshold([truth.astype(float)], [truth])
        assert score == pytest.approx(1.0)

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(9)
        maps = [rng.random((12, 12)) for _ in range(4)]
        truths = [(rng.random((12, 12)) > 0.6).astype(np.uint8) for _ in range(4)]
        truths[0][0, 0] = 1  # keep at least one non-empty
        got = grid_search_threshold(maps, truths)
        want = exhaustive_best_threshold(maps, truths)
        assert got[0] == pytest.approx(want[0])
        assert got[1] == pytest.approx(want[1], abs=1e-12)

    def test_empty_lists_rejected(self):
        with pytest.raises(ValueError):
            grid_search_threshold([], [])

    def test_all_empty_truths_rejected(self):
        with pytest.raises(ValueError, match="non-empty"):
            grid_search_threshold([np.zeros((2, 2))], [np.zeros((2, 2), dtype=np.uint8)])
