"""Scene generation determinism, analytic depth oracle, keypoint richness,
and the depth-domain scaling/shear transform."""

import numpy as np
import pytest

from fusanet import filters, losses, saliency, synth


def rebuild_depth_from_descriptor(desc):
    """Independent recomputation of the depth map from recorded parameters."""
    h, w = desc["height"], desc["width"]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    layers = []
    for p in desc["primitives"]:
        if p["kind"] == "background":
            layers.append(p["z0"] + p["sx"] * (xs - w / 2) + p["sy"] * (ys - h / 2))
        elif p["kind"] == "plane":
            layer = np.full((h, w), np.inf)
            region = ((ys >= p["r0"]) & (ys < p["r0"] + p["rh"])
                      & (xs >= p["c0"]) & (xs < p["c0"] + p["rw"]))
            vals = p["z0"] + p["sx"] * (xs - p["c0"]) + p["sy"] * (ys - p["r0"])
            layer[region] = vals[region]
            layers.append(layer)
        elif p["kind"] == "sphere":
            layer = np.full((h, w), np.inf)
            rho2 = (xs - p["cx"]) ** 2 + (ys - p["cy"]) ** 2
            inside = rho2 <= p["r_px"] ** 2
            layer[inside] = p["z_apex"] + p["big_r"] - np.sqrt(p["big_r"] ** 2 - rho2[inside])
            layers.append(layer)
        elif p["kind"] == "box":
            layer = np.full((h, w), np.inf)
            region = ((ys >= p["r0"]) & (ys < p["r0"] + p["rh"])
                      & (xs >= p["c0"]) & (xs < p["c0"] + p["rw"]))
            layer[region] = p["z0"]
            layers.append(layer)
    depth = np.min(np.stack(layers), axis=0)
    for wv in desc["waves"]:
        omega = 2 * np.pi / wv["period"]
        depth += wv["amp"] * np.sin(
            omega * (np.cos(wv["theta"]) * xs + np.sin(wv["theta"]) * ys) + wv["phase"])
    return depth


class TestGenerate:
    def test_seed_repeat_is_bitwise_identical(self):
        a = synth.generate(17)
        b = synth.generate(17)
        assert np.array_equal(a.depth, b.depth)
        assert np.array_equal(a.rgb, b.rgb)
        assert a.descriptor == b.descriptor

    def test_regenerate_from_descriptor(self):
        a = synth.generate(23, 64, 64)
        b = synth.regenerate(a.descriptor)
        assert np.array_equal(a.depth, b.depth)
        assert np.array_equal(a.rgb, b.rgb)

    def test_depth_positive_and_rgb_in_range(self):
        sc = synth.generate(5)
        assert sc.depth.min() > 0
        assert sc.rgb.min() >= 0.0 and sc.rgb.max() <= 1.0
        assert sc.valid.all()

    def test_zero_primitives_errors(self):
        with pytest.raises(ValueError, match="primitive"):
            synth.generate(0, spec=synth.SceneSpec(n_planes=0, n_spheres=0, n_boxes=0))

    def test_flat_plane_scene_is_exactly_flat(self):
        sc = synth.flat_plane_scene(2.0, 32, 32)
        assert np.all(sc.depth == 2.0)
        field = filters.hessian_field(sc.depth).data
        assert np.abs(field).max() < 1e-10

    def test_depth_matches_analytic_recomputation(self):
        for seed in (0, 9, 31):
            sc = synth.generate(seed)
            expect = rebuild_depth_from_descriptor(sc.descriptor)
            # generated depth is snapped to the float32 grid
            np.testing.assert_allclose(sc.depth, expect, rtol=0, atol=1e-5)

    def test_curvature_floor_holds(self):
        for seed in (2, 12, 77):
            sc = synth.generate(seed)
            assert synth.min_curvature_norm(sc.depth) >= synth.CURVATURE_FLOOR

    def test_keypoint_richness(self):
        for seed in range(12):
            sc = synth.generate(400 + seed)
            gray = sc.rgb @ np.array([0.299, 0.587, 0.114])
            assert len(saliency.detect_keypoints(gray)) >= 20


class TestGbrTransform:
    def test_identity(self):
        sc = synth.generate(3)
        out = synth.gbr_transform(sc.depth, 1.0, 0.0, 0.0, 0.0)
        np.testing.assert_array_equal(out, sc.depth)

    def test_constant_scaling(self):
        const = np.full((8, 8), 3.0)
        out = synth.gbr_transform(const, 2.0, 0.0, 0.0, 0.0)
        np.testing.assert_array_equal(out, np.full((8, 8), 6.0))

    def test_shear_uses_pixel_columns_and_rows(self):
        z = np.zeros((4, 5))
        out = synth.gbr_transform(z, 1.0, 1.0, 10.0, 0.0)
        expect = np.add.outer(10.0 * np.arange(4), np.arange(5.0))
        np.testing.assert_array_equal(out, expect)

    def test_zero_scale_errors(self):
        with pytest.raises(ValueError, match="a = 0"):
            synth.gbr_transform(np.ones((4, 4)), 0.0, 0.0, 0.0, 0.0)

    def test_composition(self):
        sc = synth.generate(8)
        p = (1.5, 0.01, -0.02, 0.3)
        q = (0.7, -0.03, 0.02, -0.1)
        once = synth.gbr_transform(synth.gbr_transform(sc.depth, *p), *q)
        composed = (q[0] * p[0], q[0] * p[1] + q[1], q[0] * p[2] + q[2], q[0] * p[3] + q[3])
        direct = synth.gbr_transform(sc.depth, *composed)
        np.testing.assert_allclose(once, direct, rtol=0, atol=1e-12)

    def test_mask_passthrough(self):
        sc = synth.generate(4)
        mask = sc.valid.copy()
        mask[0, 0] = False
        out, mv = synth.gbr_transform(sc.depth, 2.0, 0.0, 0.0, 0.0, valid=mask)
        assert mv[0, 0] == False and mv[1, 1] == True  # noqa: E712

    def test_hessian_loss_invariance_example(self):
        sc = synth.generate(11)
        d2 = synth.gbr_transform(sc.depth, 1.5, 0.01, -0.02, 0.3)
        lh = losses.loss_hessian(d2, sc.depth)
        assert float(lh.data) < 1e-6
