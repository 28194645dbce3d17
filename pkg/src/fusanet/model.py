"""The fusion/saliency depth network.

FusionNet is a five-scale U of FusionBlocks.  Each block fuses four encoder
branches (native-resolution conv, half-resolution conv, normalized conv,
point-feature scatter) behind a residual 1x1, predicts a confidence map with
a normalized-convolution chain, and decodes depth through a dual branch
where the confidence path guides the feature path.  FuSaNet runs FusionNet
twice: the first pass's confidence, features, and depth feed the saliency
head, whose points prime the second pass.

Per-point structural features come from a small pointwise embedding of
(normalized row, normalized col, depth) scatter-added onto the feature grid
and smoothed by one 3x3 conv.
"""

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .layers import Conv2d, Linear, Module
from .losses import project_points
from .nconv import ConfidencePredictor, NConv2d
from .saliency import GuidingPointSet, SaliencyHead, rasterize, select_salient_points

_DEPTH_BIAS = 3.0  # softplus(3) ~ 3 m: start predictions mid-range


class InputStack(Module):
    """Low-level feature and attention extraction from RGB + sparse points.

    Two normalized convolutions run on (sparse depth, mask-or-confidence),
    two plain convolutions on the RGBD stack; the concatenated features pass
    one more conv.  The normalized-conv confidence output is the attention
    map handed to the first fusion block.
    """

    def __init__(self, cfg, rng):
        h = cfg.stack_hidden
        self.nconv1 = NConv2d(1, h, 3, rng)
        self.nconv2 = NConv2d(h, h, 3, rng)
        self.conv1 = Conv2d(4, h, 3, rng)
        self.conv2 = Conv2d(h, h, 3, rng)
        self.fuse = Conv2d(2 * h, cfg.channels[0], 3, rng)

    def __call__(self, rgb, sparse_depth, conf_in):
        rgbd = T.concat([rgb, sparse_depth], axis=1)
        y, c = self.nconv1(sparse_depth, conf_in)
        y, c = self.nconv2(y, c)
        r = T.relu(self.conv2(T.relu(self.conv1(rgbd))))
        feats = T.relu(self.fuse(T.concat([y, r], axis=1)))
        return feats, c


class PointBranch(Module):
    """Scatter-embedded structural features from a 3D point set."""

    def __init__(self, channels, hidden, rng):
        self.channels = channels
        self.embed1 = Linear(3, hidden, rng)
        self.embed2 = Linear(hidden, channels, rng)
        self.smooth = Conv2d(channels, channels, 3, rng)

    def __call__(self, points, h, w, depths=None):
        """points: GuidingPointSet at this scale; `depths` may override the
        stored depths with a Tensor to keep them in the graph."""
        if len(points) == 0:
            return T.Tensor(np.zeros((1, self.channels, h, w)))
        coords = np.stack([
            points.rows / max(h - 1, 1),
            points.cols / max(w - 1, 1),
        ], axis=1)
        d = depths if depths is not None else T.Tensor(points.depths)
        feats = T.concat([T.Tensor(coords), T.reshape(d, (len(points), 1))], axis=1)
        emb = self.embed2(T.relu(self.embed1(feats)))
        grid = T.scatter_channels(emb, points.rows, points.cols, (self.channels, h, w))
        return self.smooth(grid)


class FusionBlock(Module):
    """One scale: feature-fusion encoder, confidence predictor, decoder and
    refinement (see the module docstring for the data flow)."""

    def __init__(self, channels, cfg, rng):
        c = channels
        self.conv_native = Conv2d(c, c, 3, rng)
        self.conv_half = Conv2d(c, c, 3, rng)
        self.nconv_enc = NConv2d(c, c, 3, rng)
        self.point_branch = PointBranch(c, cfg.point_hidden, rng) if cfg.use_point_branch else None
        self.fuse = Conv2d(c, c, 1, rng, weight_scale=0.3)
        self.cp = (ConfidencePredictor(c, max(c // 2, 4), cfg.cp_depth, rng)
                   if cfg.use_confidence_predictor else None)
        self.dec_in = Conv2d(2 * c, c, 3, rng)
        self.dec_nconv = NConv2d(c, c, 3, rng)
        self.dec_conv = Conv2d(c, c, 3, rng, weight_scale=0.5)
        self.ref_nconv = NConv2d(c, c, 3, rng)
        self.ref_conv = Conv2d(c, c, 3, rng, weight_scale=0.5)
        self.depth_head = Conv2d(c, 1, 1, rng, weight_scale=0.1)
        self.depth_head.bias.data[:] = _DEPTH_BIAS

    def encode(self, feats, attention, points):
        h, w = feats.shape[2], feats.shape[3]
        b = T.relu(self.conv_native(feats))
        if min(h, w) >= 4:  # below this the half-resolution branch degenerates
            half = T.relu(self.conv_half(T.downsample2x_avg(feats)))
            b = T.add(b, T.upsample2x_bilinear(half))
        y, attention_out = self.nconv_enc(feats, attention)
        b = T.add(b, y)
        if self.point_branch is not None:
            b = T.add(b, self.point_branch(points, h, w))
        fused = T.add(feats, self.fuse(b))
        return fused, attention_out

    def predict_confidence(self, fused, attention):
        if self.cp is None:
            n, _, h, w = fused.shape
            return T.Tensor(np.ones((n, 1, h, w)))
        return self.cp(fused, attention)

    def decode(self, fused, conf, deeper=None):
        # normalized-conv outputs are confidence-weighted local averages and
        # are used raw: a relu would gate whole maps on the sign of the mean
        x = fused if deeper is None else T.relu(self.dec_in(T.concat([fused, deeper], axis=1)))
        u, cu = self.dec_nconv(x, conf)
        low = T.relu(self.dec_conv(T.add(x, u)))
        r, _ = self.ref_nconv(u, cu)
        decoded = T.relu(self.ref_conv(T.add(low, r)))
        depth = T.softplus(self.depth_head(decoded))
        return depth, decoded

    def __call__(self, feats, attention, points, conf_deeper_features=None):
        """Single-block convenience: encode, predict confidence, decode."""
        fused, attention_out = self.encode(feats, attention, points)
        conf = self.predict_confidence(fused, attention_out)
        depth, decoded = self.decode(fused, conf, conf_deeper_features)
        return fused, attention_out, conf, depth


class FusionNet(Module):
    """Five FusionBlocks over a 2x pyramid with a decoder pass back up."""

    def __init__(self, cfg, rng):
        self.cfg = cfg
        ch = cfg.channels
        self.stack = InputStack(cfg, rng)
        self.blocks = [FusionBlock(c, cfg, rng) for c in ch]
        # unit-gain init: these see pre-activation features, He gain would
        # double variance per scale
        self.down_lift = [Conv2d(ch[i], ch[i + 1], 1, rng, weight_scale=0.7) for i in range(4)]
        self.dec_lift = [Conv2d(ch[i + 1], ch[i], 1, rng, weight_scale=0.7) for i in range(4)]

    def __call__(self, rgb, points, conf_override=None):
        """rgb: (1, 3, H, W) tensor with H, W divisible by 16.

        Returns dict with per-scale depth and confidence pyramids (finest
        first), the scale-1 fused features, and the input attention map.
        `conf_override` replaces the rasterized binary mask as the sparse
        branch confidence (the salient second pass feeds saliency values).
        """
        rgb = T.as_tensor(rgb)
        if rgb.ndim != 4 or rgb.shape[1] != 3:
            raise ValueError(f"expected RGB of shape (1, 3, H, W), got {rgb.shape}")
        h, w = rgb.shape[2], rgb.shape[3]
        if h % 16 or w % 16:
            raise ValueError(f"spatial extents must be divisible by 16, got {h}x{w}")
        points.check_bounds(h, w)

        sparse_np, mask_np = rasterize(points, h, w)
        sparse = T.Tensor(sparse_np.reshape(1, 1, h, w))
        conf_in = conf_override if conf_override is not None \
            else T.Tensor(mask_np.reshape(1, 1, h, w))

        point_sets = project_points(points, 5)
        feats, attention = self.stack(rgb, sparse, conf_in)

        fused_list, conf_list = [], []
        for i, block in enumerate(self.blocks):
            fused, attention = block.encode(feats, attention, point_sets[i])
            conf_list.append(block.predict_confidence(fused, attention))
            fused_list.append(fused)
            if i < 4:
                feats = self.down_lift[i](T.downsample2x_avg(fused))
                attention = T.downsample2x_avg(attention)

        depths = [None] * 5
        deeper = None
        for i in range(4, -1, -1):
            if deeper is not None:
                deeper = T.upsample2x_bilinear(self.dec_lift[i](deeper))
            depths[i], decoded = self.blocks[i].decode(fused_list[i], conf_list[i], deeper)
            deeper = decoded
        return {
            "depths": depths,
            "confs": conf_list,
            "features": fused_list[0],
        }


class FuSaNet(Module):
    """Two-pass wrapper: guiding points prime pass one, the saliency head
    turns its outputs into salient points, and pass two produces the final
    prediction.  With saliency disabled the first pass is the final output."""

    def __init__(self, cfg=None, rng=None):
        cfg = cfg or ModelConfig()
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        self.fusion = FusionNet(cfg, rng)
        self.fusion2 = self.fusion if cfg.shared_two_pass else FusionNet(cfg, rng)
        self.head = SaliencyHead(cfg.channels[0], rng, cfg.branch_channels) \
            if cfg.use_saliency else None

    def two_pass(self, rgb, points=None, k=None, depth_lookup=None):
        """Full pipeline.  `depth_lookup` optionally supplies the (H, W)
        array salient depths are read from (ground truth during training);
        by default they come from the first pass's predicted depth."""
        cfg = self.cfg
        points = points if points is not None else GuidingPointSet.empty()
        k = cfg.salient_points if k is None else k
        pass1 = self.fusion(T.as_tensor(rgb), points)
        if self.head is None:
            return {"pass1": pass1, "salient": GuidingPointSet.empty(),
                    "saliency_map": None, "final": pass1}

        smap = self.head.saliency_map(pass1["confs"][0], pass1["features"], pass1["depths"][0])
        lookup = depth_lookup if depth_lookup is not None else pass1["depths"][0].data[0, 0]
        salient = select_salient_points(smap.data[0, 0], np.asarray(lookup), k)

        h, w = smap.shape[2], smap.shape[3]
        if len(salient):
            vals = T.gather_pixels(smap, salient.rows, salient.cols)
            conf_override = T.scatter_pixels(vals, salient.rows, salient.cols, (h, w))
        else:
            conf_override = T.Tensor(np.zeros((1, 1, h, w)))
        pass2 = self.fusion2(T.as_tensor(rgb), salient, conf_override=conf_override)
        return {"pass1": pass1, "salient": salient, "saliency_map": smap, "final": pass2}

    def predict(self, rgb):
        """Inference: RGB only, no points, depths read from pass one."""
        with T.no_grad():
            out = self.two_pass(rgb, GuidingPointSet.empty())
        return out
