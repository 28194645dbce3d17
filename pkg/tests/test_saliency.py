"""Keypoint detection, guiding-point machinery, and the saliency head."""

import numpy as np
import pytest

from fusanet import synth
from fusanet import tensor as T
from fusanet.saliency import (
    MFE_DILATIONS,
    GuidingPointSet,
    MultiScaleFeatureBank,
    SaliencyHead,
    detect_keypoints,
    rasterize,
    sample_guiding_points,
    select_salient_points,
)


def gaussian_blob_image(n=64, row=32, col=32, sigma=2.0, amp=0.45):
    ys, xs = np.mgrid[0:n, 0:n].astype(float)
    return 0.5 + amp * np.exp(-(((ys - row) ** 2 + (xs - col) ** 2) / (2 * sigma**2)))


class TestGuidingPointSet:
    def test_validation(self):
        with pytest.raises(ValueError, match="duplicate"):
            GuidingPointSet.from_arrays([1, 1], [2, 2], [1.0, 2.0])
        with pytest.raises(ValueError, match="positive"):
            GuidingPointSet.from_arrays([1], [2], [-1.0])
        with pytest.raises(ValueError, match="lengths"):
            GuidingPointSet.from_arrays([1], [2, 3], [1.0, 2.0])

    def test_bounds_check(self):
        pts = GuidingPointSet.from_arrays([3], [9], [1.0])
        pts.check_bounds(10, 10)
        with pytest.raises(ValueError, match="outside"):
            pts.check_bounds(10, 9)

    def test_halving_averages_collisions(self):
        pts = GuidingPointSet.from_arrays([4, 5, 8], [6, 7, 2], [1.0, 3.0, 2.0])
        half = pts.halved()
        assert len(half) == 2
        i = list(zip(half.rows, half.cols)).index((2, 3))
        assert half.depths[i] == pytest.approx(2.0)

    def test_empty(self):
        assert len(GuidingPointSet.empty()) == 0
        assert len(GuidingPointSet.empty().halved()) == 0


class TestRasterize:
    def test_empty(self):
        depth, mask = rasterize(GuidingPointSet.empty(), 4, 4)
        assert depth.sum() == 0 and mask.sum() == 0

    def test_single_point(self):
        pts = GuidingPointSet.from_arrays([2], [3], [1.5])
        depth, mask = rasterize(pts, 4, 4)
        assert depth[2, 3] == 1.5 and mask[2, 3] == 1.0
        assert depth.sum() == 1.5 and mask.sum() == 1.0

    def test_mask_sum_counts_distinct_pixels(self):
        rng = np.random.default_rng(0)
        idx = rng.choice(64 * 64, size=500, replace=False)
        rows, cols = np.divmod(idx, 64)
        pts = GuidingPointSet.from_arrays(rows, cols, rng.uniform(1, 5, 500))
        _, mask = rasterize(pts, 64, 64)
        assert mask.sum() == 500


class TestDetectKeypoints:
    def test_constant_image_gives_nothing(self):
        assert detect_keypoints(np.full((64, 64), 0.4)) == []

    def test_blob_gives_exactly_one_centered_keypoint(self):
        kps = detect_keypoints(gaussian_blob_image())
        assert len(kps) == 1
        assert abs(kps[0].row - 32.0) <= 1.0
        assert abs(kps[0].col - 32.0) <= 1.0

    def test_flip_mirrors_keypoints(self):
        sc = synth.generate(51)
        gray = sc.rgb @ np.array([0.299, 0.587, 0.114])
        kps = detect_keypoints(gray)
        kps_f = detect_keypoints(gray[:, ::-1].copy())
        assert len(kps) == len(kps_f)
        w = gray.shape[1]
        mirrored = [(kp.row, w - 1 - kp.col) for kp in kps_f]
        for kp in kps:
            best = min(max(abs(kp.row - r), abs(kp.col - c)) for r, c in mirrored)
            # subpixel offsets clamp at half a pixel, so the mirror deviation
            # boundary is exactly 1 px
            assert best <= 1.0 + 1e-9

    def test_deterministic(self):
        sc = synth.generate(52)
        gray = sc.rgb @ np.array([0.299, 0.587, 0.114])
        a = [(k.row, k.col, k.scale, k.response) for k in detect_keypoints(gray)]
        b = [(k.row, k.col, k.scale, k.response) for k in detect_keypoints(gray)]
        assert a == b

    def test_sorted_by_response_magnitude(self):
        sc = synth.generate(53)
        gray = sc.rgb @ np.array([0.299, 0.587, 0.114])
        kps = detect_keypoints(gray)
        mags = [abs(k.response) for k in kps]
        assert mags == sorted(mags, reverse=True)

    def test_small_image_errors(self):
        with pytest.raises(ValueError, match="small"):
            detect_keypoints(np.zeros((16, 16)))


class TestSampleGuidingPoints:
    def test_zero_budget(self):
        sc = synth.generate(54)
        gray = sc.rgb @ np.array([0.299, 0.587, 0.114])
        kps = detect_keypoints(gray)
        assert len(sample_guiding_points(kps, sc.depth, 0)) == 0

    def test_budget_larger_than_supply(self):
        kps = detect_keypoints(gaussian_blob_image())
        gt = np.full((64, 64), 2.0)
        pts = sample_guiding_points(kps, gt, 50)
        assert len(pts) == 1

    def test_depths_read_from_gt_exactly(self):
        sc = synth.generate(55)
        gray = sc.rgb @ np.array([0.299, 0.587, 0.114])
        pts = sample_guiding_points(detect_keypoints(gray), sc.depth, 5)
        assert len(pts) == 5
        for r, c, d in zip(pts.rows, pts.cols, pts.depths):
            assert d == sc.depth[r, c]

    def test_invalid_pixels_skipped(self):
        sc = synth.generate(56)
        gray = sc.rgb @ np.array([0.299, 0.587, 0.114])
        kps = detect_keypoints(gray)
        valid = np.zeros_like(sc.valid)
        pts = sample_guiding_points(kps, sc.depth, 10, valid)
        assert len(pts) == 0


class TestSaliencyHead:
    def make(self, channels=6, seed=0):
        return SaliencyHead(channels, np.random.default_rng(seed))

    def test_mfe_uses_the_seven_dilations(self):
        assert MFE_DILATIONS == (3, 5, 7, 9, 15, 16, 21)
        bank = MultiScaleFeatureBank(4, 2, np.random.default_rng(1))
        assert len(bank.branches) == 9
        assert bank.out_channels == 9 * 2
        dilations = [b.dilation for b in bank.branches[2:]]
        assert tuple(dilations) == MFE_DILATIONS

    @pytest.mark.parametrize("dilation", MFE_DILATIONS)
    def test_mfe_preserves_spatial_shape(self, dilation):
        rng = np.random.default_rng(2)
        bank = MultiScaleFeatureBank(3, 2, rng)
        x = T.Tensor(rng.standard_normal((1, 3, 48, 48)))
        out = bank(x)
        assert out.shape == (1, 18, 48, 48)

    def test_zero_budget_returns_map_and_no_points(self):
        rng = np.random.default_rng(3)
        head = self.make()
        conf = T.Tensor(rng.uniform(size=(1, 1, 32, 32)))
        feats = T.Tensor(rng.standard_normal((1, 6, 32, 32)))
        depth = T.Tensor(rng.uniform(1, 4, (1, 1, 32, 32)))
        pts, smap = head(conf, feats, depth, k=0)
        assert len(pts) == 0
        assert smap.shape == (1, 1, 32, 32)
        assert smap.data.min() > 0 and smap.data.max() < 1

    def test_negative_budget_errors(self):
        head = self.make()
        z = T.Tensor(np.zeros((1, 1, 32, 32)))
        f = T.Tensor(np.zeros((1, 6, 32, 32)))
        with pytest.raises(ValueError, match="non-negative"):
            head(z, f, z, k=-1)

    def test_deterministic_forward(self):
        rng = np.random.default_rng(4)
        head = self.make(seed=5)
        conf = T.Tensor(rng.uniform(size=(1, 1, 32, 32)))
        feats = T.Tensor(rng.standard_normal((1, 6, 32, 32)))
        depth = T.Tensor(rng.uniform(1, 4, (1, 1, 32, 32)))
        p1, m1 = head(conf, feats, depth, k=30)
        p2, m2 = head(conf, feats, depth, k=30)
        assert np.array_equal(m1.data, m2.data)
        assert np.array_equal(p1.rows, p2.rows) and np.array_equal(p1.cols, p2.cols)

    def test_points_carry_depth_input_values(self):
        rng = np.random.default_rng(6)
        head = self.make(seed=7)
        conf = T.Tensor(rng.uniform(size=(1, 1, 32, 32)))
        feats = T.Tensor(rng.standard_normal((1, 6, 32, 32)))
        depth_arr = rng.uniform(1, 4, (1, 1, 32, 32))
        pts, _ = head(conf, feats, T.Tensor(depth_arr), k=20)
        assert len(pts) > 0
        for r, c, d in zip(pts.rows, pts.cols, pts.depths):
            assert d == depth_arr[0, 0, r, c]

    def test_saliency_map_is_differentiable(self):
        rng = np.random.default_rng(8)
        head = self.make(channels=3, seed=9)
        feats0 = rng.standard_normal((1, 3, 16, 16))
        conf = T.Tensor(rng.uniform(size=(1, 1, 16, 16)))
        depth = T.Tensor(rng.uniform(1, 4, (1, 1, 16, 16)))
        rep = T.gradcheck(
            lambda f: head.saliency_map(conf, f, depth).rms(), T.Tensor(feats0), tol=1e-3)
        assert rep.passed, str(rep)


class TestSelectSalientPoints:
    def test_nms_chebyshev_distance(self):
        rng = np.random.default_rng(10)
        sal = rng.uniform(size=(64, 64))
        depth = rng.uniform(1, 5, (64, 64))
        pts = select_salient_points(sal, depth, k=80, nms_radius=5)
        assert len(pts) > 10
        for i in range(len(pts)):
            for j in range(i + 1, len(pts)):
                cheb = max(abs(int(pts.rows[i]) - int(pts.rows[j])),
                           abs(int(pts.cols[i]) - int(pts.cols[j])))
                assert cheb >= 5

    def test_takes_strongest_first(self):
        sal = np.zeros((32, 32))
        sal[4, 4] = 0.9
        sal[20, 20] = 0.8
        sal[4, 6] = 0.85  # suppressed by (4,4)
        depth = np.ones((32, 32))
        pts = select_salient_points(sal, depth, k=2, nms_radius=5)
        coords = set(zip(pts.rows.tolist(), pts.cols.tolist()))
        assert (4, 4) in coords and (20, 20) in coords

    def test_nonpositive_depths_skipped(self):
        sal = np.zeros((32, 32))
        sal[4, 4] = 0.9
        sal[20, 20] = 0.8
        depth = np.ones((32, 32))
        depth[4, 4] = 0.0
        pts = select_salient_points(sal, depth, k=1, nms_radius=5)
        assert (20, 20) in set(zip(pts.rows.tolist(), pts.cols.tolist()))
