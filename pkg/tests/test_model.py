"""Network structure: shapes, positivity, residual identity, point branch
superposition, determinism, and the parameter-count audit."""

import numpy as np
import pytest

from fusanet import synth
from fusanet import tensor as T
from fusanet.config import ModelConfig
from fusanet.model import FusionBlock, FusionNet, FuSaNet, InputStack, PointBranch
from fusanet.saliency import GuidingPointSet


def rgb_tensor(scene):
    return T.Tensor(scene.rgb.transpose(2, 0, 1)[None])


def hand_count_parameters(cfg):
    """Layer-by-layer arithmetic from the architecture description."""
    h = cfg.stack_hidden
    c0 = cfg.channels[0]
    total = 0
    # input stack: two nconvs on (sparse, mask), two convs on rgbd, fuse conv
    total += 1 * h * 9 + h            # nconv1
    total += h * h * 9 + h            # nconv2
    total += 4 * h * 9 + h            # conv1
    total += h * h * 9 + h            # conv2
    total += 2 * h * c0 * 9 + c0      # fuse

    for c in cfg.channels:
        total += c * c * 9 + c        # native 3x3
        total += c * c * 9 + c        # half-resolution 3x3
        total += c * c * 9 + c        # encoder nconv
        if cfg.use_point_branch:
            ph = cfg.point_hidden
            total += 3 * ph + ph      # embed1
            total += ph * c + c       # embed2
            total += c * c * 9 + c    # smoothing conv
        total += c * c + c            # 1x1 fusion
        if cfg.use_confidence_predictor:
            hh = max(c // 2, 4)
            chain = [c] + [hh] * (cfg.cp_depth - 1) + [1]
            for i in range(cfg.cp_depth):
                total += chain[i] * chain[i + 1] * 9 + chain[i + 1]
        total += 2 * c * c * 9 + c    # decoder input conv (2C -> C)
        total += c * c * 9 + c        # decoder nconv
        total += c * c * 9 + c        # decoder conv
        total += c * c * 9 + c        # refinement nconv
        total += c * c * 9 + c        # refinement conv
        total += c + 1                # depth head 1x1

    for i in range(4):
        total += cfg.channels[i] * cfg.channels[i + 1] + cfg.channels[i + 1]  # down lift
        total += cfg.channels[i + 1] * cfg.channels[i] + cfg.channels[i]      # decoder lift

    if cfg.use_saliency:
        bc = cfg.branch_channels
        for cin in (c0 + 1, 2):       # feature stack and depth stack banks
            total += cin * bc * 9 + bc          # 3x3
            total += cin * bc * 25 + bc         # 5x5
            total += 7 * (cin * bc * 9 + bc)    # dilated 3x3
        mixed = 9 * bc
        total += 2 * (mixed * mixed + mixed)    # 1x1 mixers
        total += mixed + 1                      # output 1x1
    return total


class TestInputStack:
    def test_empty_points_bias_path_defined(self):
        cfg = ModelConfig()
        stack = InputStack(cfg, np.random.default_rng(0))
        rgb = rgb_tensor(synth.generate(60))
        sparse = T.Tensor(np.zeros((1, 1, 64, 64)))
        conf = T.Tensor(np.zeros((1, 1, 64, 64)))
        feats, c = stack(rgb, sparse, conf)
        assert feats.shape == (1, cfg.channels[0], 64, 64)
        assert np.isfinite(feats.data).all()
        np.testing.assert_array_equal(c.data, 0.0)

    def test_deterministic(self):
        cfg = ModelConfig()
        stack = InputStack(cfg, np.random.default_rng(1))
        rgb = rgb_tensor(synth.generate(61))
        sparse = T.Tensor(np.zeros((1, 1, 64, 64)))
        conf = T.Tensor(np.ones((1, 1, 64, 64)))
        a, ca = stack(rgb, sparse, conf)
        b, cb = stack(rgb, sparse, conf)
        assert np.array_equal(a.data, b.data) and np.array_equal(ca.data, cb.data)


class TestPointBranch:
    def test_empty_points_give_zero(self):
        pb = PointBranch(8, 4, np.random.default_rng(2))
        out = pb(GuidingPointSet.empty(), 16, 16)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_single_point_support_is_3x3(self):
        pb = PointBranch(8, 4, np.random.default_rng(3))
        pts = GuidingPointSet.from_arrays([8], [9], [2.5])
        out = pb(pts, 16, 16).data
        nz = np.argwhere(np.abs(out[0]).sum(axis=0) > 0)
        assert len(nz) > 0
        assert nz[:, 0].min() >= 7 and nz[:, 0].max() <= 9
        assert nz[:, 1].min() >= 8 and nz[:, 1].max() <= 10

    def test_superposition_of_two_points(self):
        pb = PointBranch(6, 4, np.random.default_rng(4))
        p1 = GuidingPointSet.from_arrays([3], [4], [2.0])
        p2 = GuidingPointSet.from_arrays([10], [12], [3.0])
        both = GuidingPointSet.from_arrays([3, 10], [4, 12], [2.0, 3.0])
        a = pb(p1, 16, 16).data
        b = pb(p2, 16, 16).data
        ab = pb(both, 16, 16).data
        np.testing.assert_allclose(ab, a + b, atol=1e-12)

    def test_differentiable_in_depths(self):
        pb = PointBranch(4, 4, np.random.default_rng(5))
        pts = GuidingPointSet.from_arrays([2, 7], [3, 9], [2.0, 3.0])
        rep = T.gradcheck(
            lambda d: pb(pts, 12, 12, depths=d).rms(),
            T.Tensor(pts.depths.copy()), tol=1e-3)
        assert rep.passed, str(rep)


class TestFusionBlock:
    def test_disabled_point_branch_equals_empty_points(self):
        cfg = ModelConfig()
        block = FusionBlock(16, cfg, np.random.default_rng(6))
        rng = np.random.default_rng(7)
        feats = T.Tensor(rng.standard_normal((1, 16, 16, 16)))
        att = T.Tensor(rng.uniform(size=(1, 1, 16, 16)))
        with_branch, _ = block.encode(feats, att, GuidingPointSet.empty())
        block.point_branch = None
        without, _ = block.encode(feats, att, GuidingPointSet.empty())
        np.testing.assert_array_equal(with_branch.data, without.data)

    def test_zeroed_fusion_conv_gives_identity_encoder(self):
        cfg = ModelConfig()
        block = FusionBlock(16, cfg, np.random.default_rng(8))
        block.fuse.weight.data[:] = 0.0
        block.fuse.bias.data[:] = 0.0
        rng = np.random.default_rng(9)
        feats = T.Tensor(rng.standard_normal((1, 16, 16, 16)))
        att = T.Tensor(rng.uniform(size=(1, 1, 16, 16)))
        fused, _ = block.encode(feats, att, GuidingPointSet.empty())
        np.testing.assert_array_equal(fused.data, feats.data)

    def test_block_convenience_call(self):
        cfg = ModelConfig()
        block = FusionBlock(16, cfg, np.random.default_rng(10))
        rng = np.random.default_rng(11)
        feats = T.Tensor(rng.standard_normal((1, 16, 16, 16)))
        att = T.Tensor(rng.uniform(size=(1, 1, 16, 16)))
        fused, att2, conf, depth = block(feats, att, GuidingPointSet.empty())
        assert fused.shape == feats.shape
        assert conf.shape == (1, 1, 16, 16)
        assert depth.shape == (1, 1, 16, 16)
        assert depth.data.min() > 0


class TestFusionNet:
    def test_pyramid_shapes_and_positivity(self):
        cfg = ModelConfig()
        net = FusionNet(cfg, np.random.default_rng(12))
        sc = synth.generate(62)
        out = net(rgb_tensor(sc), GuidingPointSet.empty())
        for i, (d, c) in enumerate(zip(out["depths"], out["confs"])):
            assert d.shape == (1, 1, 64 // 2**i, 64 // 2**i)
            assert c.shape == (1, 1, 64 // 2**i, 64 // 2**i)
            assert d.data.min() > 0
            assert c.data.min() >= 0 and c.data.max() <= 1
        assert out["features"].shape == (1, cfg.channels[0], 64, 64)

    def test_not_divisible_by_16_errors(self):
        cfg = ModelConfig()
        net = FusionNet(cfg, np.random.default_rng(13))
        with pytest.raises(ValueError, match="divisible"):
            net(T.Tensor(np.zeros((1, 3, 40, 40))), GuidingPointSet.empty())

    def test_parameter_count_matches_hand_audit(self):
        for kwargs in ({}, {"use_point_branch": False},
                       {"use_confidence_predictor": False}):
            cfg = ModelConfig(**kwargs)
            net = FuSaNet(cfg, np.random.default_rng(14))
            assert net.n_parameters() == hand_count_parameters(cfg), kwargs

    def test_toy_budget(self):
        net = FuSaNet(ModelConfig(), np.random.default_rng(15))
        assert net.n_parameters() < 2_000_000


class TestTwoPass:
    def test_inference_with_empty_points(self):
        net = FuSaNet(ModelConfig(), np.random.default_rng(16))
        sc = synth.generate(63)
        out = net.predict(sc.rgb.transpose(2, 0, 1)[None])
        d = out["final"]["depths"][0]
        assert d.shape == (1, 1, 64, 64)
        assert d.data.min() > 0

    def test_zero_salient_budget_still_defined(self):
        cfg = ModelConfig(salient_points=0)
        net = FuSaNet(cfg, np.random.default_rng(17))
        sc = synth.generate(64)
        out = net.two_pass(rgb_tensor(sc), GuidingPointSet.empty())
        assert len(out["salient"]) == 0
        assert out["final"]["depths"][0].data.min() > 0

    def test_bitwise_deterministic_repeat(self):
        net = FuSaNet(ModelConfig(), np.random.default_rng(18))
        sc = synth.generate(65)
        a = net.two_pass(rgb_tensor(sc), GuidingPointSet.empty())
        b = net.two_pass(rgb_tensor(sc), GuidingPointSet.empty())
        assert np.array_equal(a["final"]["depths"][0].data, b["final"]["depths"][0].data)
        assert np.array_equal(a["saliency_map"].data, b["saliency_map"].data)
        assert np.array_equal(a["salient"].rows, b["salient"].rows)

    def test_saliency_disabled_returns_first_pass(self):
        cfg = ModelConfig(use_saliency=False)
        net = FuSaNet(cfg, np.random.default_rng(19))
        sc = synth.generate(66)
        out = net.two_pass(rgb_tensor(sc), GuidingPointSet.empty())
        assert out["final"] is out["pass1"]
        assert len(out["salient"]) == 0

    def test_unshared_two_pass_has_more_parameters(self):
        shared = FuSaNet(ModelConfig(), np.random.default_rng(20))
        unshared = FuSaNet(ModelConfig(shared_two_pass=False), np.random.default_rng(20))
        assert unshared.n_parameters() > shared.n_parameters()


class TestFullStepGradients:
    def test_twenty_random_parameters_match_finite_differences(self):
        """Whole-pipeline spot check on an 8-scene batch at 32x32 (takes
        about a minute: 40 extra forward passes)."""
        from fusanet import train
        from fusanet.config import RunConfig
        from fusanet import tensor as T

        cfg = RunConfig(seed=31)
        scenes = [synth.generate(8800 + i, 32, 32) for i in range(8)]
        net = FuSaNet(cfg.model, np.random.default_rng([31, 0x1157]))
        rng = np.random.default_rng(123)

        fixed_pts = []
        for sc in scenes:
            idx = rng.choice(32 * 32, size=6, replace=False)
            rows, cols = np.divmod(idx, 32)
            fixed_pts.append(GuidingPointSet.from_arrays(rows, cols, sc.depth[rows, cols]))

        def batch_loss():
            total = None
            for sc, pts in zip(scenes, fixed_pts):
                t, _, _ = train.train_step_loss(net, sc.rgb, sc.depth, sc.valid,
                                                pts, cfg.loss, epoch=1)
                total = t if total is None else T.add(total, t)
            return T.mul(total, 1.0 / len(scenes))

        T.backward(batch_loss())
        named = list(net.named_parameters())
        h = 1e-4
        for _ in range(20):
            name, p = named[rng.integers(0, len(named))]
            i = int(rng.integers(0, p.size))
            analytic = p.grad.reshape(-1)[i] if p.grad is not None else 0.0
            orig = p.data.reshape(-1)[i]
            with T.no_grad():
                p.data.reshape(-1)[i] = orig + h
                fp = float(batch_loss().data)
                p.data.reshape(-1)[i] = orig - h
                fm = float(batch_loss().data)
                p.data.reshape(-1)[i] = orig
            numeric = (fp - fm) / (2 * h)
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1.0)
            assert rel <= 1e-3, f"{name}[{i}]: analytic {analytic:.3e} vs fd {numeric:.3e}"
