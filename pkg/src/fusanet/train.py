"""Training loop: Adam, data augmentation, point schemes, and loss logging.

Each optimizer step accumulates gradients over a mini-batch of scenes, one
two-pass forward/backward per scene.  Guiding points are re-detected on the
augmented image every iteration; under the points-dropout scheme the set is
replaced by an empty one at random iterations so the network also learns
the RGB-only regime.
"""

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import losses
from . import tensor as T
from .config import ModelConfig, RunConfig, TrainConfig
from .losses import LossWeights
from .model import FuSaNet
from .saliency import GuidingPointSet, detect_keypoints, sample_guiding_points

GRAY = np.array([0.299, 0.587, 0.114])


@dataclass
class ModelState:
    """Everything a checkpoint stores: parameters, optimizer moments, the
    step/epoch counters, and the config hash they belong to."""

    params: dict
    adam_m: dict
    adam_v: dict
    adam_t: int
    epoch: int
    config_digest: str


class Adam:
    def __init__(self, named_params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.named = list(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {n: np.zeros_like(p.data) for n, p in self.named}
        self.v = {n: np.zeros_like(p.data) for n, p in self.named}
        self.t = 0

    def step(self, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in self.named:
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for _, p in self.named:
            p.grad = None


# ---------------------------------------------------------------------------
# augmentation (plain numpy; runs before graph construction)
# ---------------------------------------------------------------------------

def rotate_sample(rgb, depth, valid, angle_deg):
    """Bilinear rotation about the image centre; pixels sampling outside the
    source (or from invalid pixels) become invalid."""
    h, w = depth.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    a = math.radians(angle_deg)
    cos_a, sin_a = math.cos(a), math.sin(a)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    yr = ys - cy
    xr = xs - cx
    src_y = cos_a * yr - sin_a * xr + cy
    src_x = sin_a * yr + cos_a * xr + cx

    inside = (src_y >= 0) & (src_y <= h - 1) & (src_x >= 0) & (src_x <= w - 1)
    y0 = np.clip(np.floor(src_y).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(src_x).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(src_y - y0, 0.0, 1.0)
    fx = np.clip(src_x - x0, 0.0, 1.0)

    def sample(img):
        top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
        bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
        return top * (1 - fy) + bot * fy

    out_rgb = np.stack([sample(rgb[:, :, ch]) for ch in range(3)], axis=2)
    out_depth = sample(depth)
    vsrc = valid.astype(np.float64)
    out_valid = inside & (sample(vsrc) >= 1.0 - 1e-9)
    return np.clip(out_rgb, 0.0, 1.0), out_depth, out_valid


def drop_windows(rgb, valid, rng, max_windows=3):
    """Zero 1..max_windows random rectangles (each at most 25% of the image)
    in RGB and invalidate them in the target mask."""
    h, w = valid.shape
    out_rgb = rgb.copy()
    out_valid = valid.copy()
    for _ in range(int(rng.integers(1, max_windows + 1))):
        rh = int(rng.integers(2, max(3, h // 2)))
        rw = int(rng.integers(2, max(3, w // 2)))
        while rh * rw > 0.25 * h * w:
            rh = max(2, rh // 2)
            rw = max(2, rw // 2)
        r0 = int(rng.integers(0, h - rh + 1))
        c0 = int(rng.integers(0, w - rw + 1))
        out_rgb[r0 : r0 + rh, c0 : c0 + rw, :] = 0.0
        out_valid[r0 : r0 + rh, c0 : c0 + rw] = False
    return out_rgb, out_valid


def color_jitter(rgb, rng):
    scale = rng.uniform(0.8, 1.2, size=3)
    shift = rng.uniform(-0.05, 0.05, size=3)
    return np.clip(rgb * scale + shift, 0.0, 1.0)


def augment_sample(rgb, depth, valid, rng):
    angle = rng.uniform(-5.0, 5.0)
    rgb, depth, valid = rotate_sample(rgb, depth, valid, angle)
    if rng.uniform() < 0.5:
        rgb = rgb[:, ::-1].copy()
        depth = depth[:, ::-1].copy()
        valid = valid[:, ::-1].copy()
    rgb, valid = drop_windows(rgb, valid, rng)
    rgb = color_jitter(rgb, rng)
    return rgb, depth, valid


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

def gather_points(rgb, depth, valid, budget):
    kps = detect_keypoints(rgb @ GRAY)
    return sample_guiding_points(kps, depth, budget, valid)


def _first_nonfinite(report):
    for i, s in enumerate(report.scales, start=1):
        for name in ("l_log", "l_grad", "l_norm", "l_c", "l_dc", "l_s", "l_h"):
            if not math.isfinite(getattr(s, name)):
                return f"scale{i}.{name}"
    if not math.isfinite(report.total):
        return "l_total"
    return None


def train_step_loss(net, scene_rgb, scene_depth, scene_valid, points, weights, epoch,
                    pass1_dc_weight=1.0):
    """One scene's differentiable loss and its report."""
    rgb_t = T.Tensor(scene_rgb.transpose(2, 0, 1)[None])
    if net.cfg.use_saliency:
        lookup = scene_depth if net.cfg.salient_depth_from_gt else None
        out = net.two_pass(rgb_t, points, depth_lookup=lookup)
        final = out["final"]
        report = losses.loss_total(final["depths"], scene_depth, final["confs"],
                                   points, weights, epoch, scene_valid)
        total = report.tensor
        if pass1_dc_weight > 0:
            dc1, _ = losses.loss_dc(out["pass1"]["depths"][0], scene_depth,
                                    out["pass1"]["confs"][0], weights, epoch, scene_valid)
            total = T.add(total, T.mul(dc1, pass1_dc_weight))
    else:
        out = net.two_pass(rgb_t, points)
        final = out["final"]
        report = losses.loss_total(final["depths"], scene_depth, final["confs"],
                                   points, weights, epoch, scene_valid)
        total = report.tensor
    return total, report, out


def pick_points(scheme, zero_point_prob, rng):
    """Decide whether this iteration feeds guiding points."""
    if scheme == "rgb-only":
        return False
    if scheme == "points":
        return True
    if scheme == "points-dropout":
        return rng.uniform() >= zero_point_prob
    raise ValueError(f"unknown point scheme {scheme!r}")


def train(scenes, run_config=None, log=None, on_epoch=None):
    """Train a fresh model on a list of scenes; returns (net, state, history).

    history holds one record per epoch: learning rate, mean loss terms, and
    timing.  `on_epoch(net, record)` runs after each epoch (evaluation
    hooks).  Raises with the name of the first non-finite term if the loss
    diverges.
    """
    cfg = run_config or RunConfig()
    mc, tc, lw = cfg.model, cfg.train, cfg.loss
    if not scenes:
        raise ValueError("training requires at least one scene")

    rng = np.random.default_rng([cfg.seed, 0xFACADE])
    net = FuSaNet(mc, np.random.default_rng([cfg.seed, 0x1157]))
    opt = Adam(net.named_parameters(), tc.adam_beta1, tc.adam_beta2, tc.adam_eps)

    history = []
    for epoch in range(1, tc.epochs + 1):
        lr = tc.learning_rate(epoch)
        order = rng.permutation(len(scenes))
        sums = {}
        count = 0
        t0 = time.time()
        batch_fill = 0
        opt.zero_grad()
        for idx in order:
            sc = scenes[idx]
            if tc.augment:
                rgb, depth, valid = augment_sample(sc.rgb, sc.depth, sc.valid, rng)
            else:
                rgb, depth, valid = sc.rgb, sc.depth, sc.valid

            use_points = pick_points(tc.scheme, tc.zero_point_prob, rng)
            points = gather_points(rgb, depth, valid, tc.gp_budget) if use_points \
                else GuidingPointSet.empty()

            total, report, _ = train_step_loss(net, rgb, depth, valid, points, lw,
                                               epoch, tc.pass1_dc_weight)
            bad = _first_nonfinite(report)
            if bad is not None:
                raise FloatingPointError(
                    f"non-finite loss at epoch {epoch}: first bad term {bad}")
            T.backward(T.mul(total, 1.0 / tc.batch_size))

            sums["l_total"] = sums.get("l_total", 0.0) + report.total
            for i, s in enumerate(report.scales, start=1):
                for name in ("l_dc", "l_s", "l_h"):
                    key = f"scale{i}.{name}"
                    sums[key] = sums.get(key, 0.0) + getattr(s, name)
            count += 1

            batch_fill += 1
            if batch_fill == tc.batch_size:
                opt.step(lr)
                opt.zero_grad()
                batch_fill = 0
        if batch_fill:
            opt.step(lr)
            opt.zero_grad()

        record = {"epoch": epoch, "lr": lr, "seconds": time.time() - t0}
        record.update({k: v / count for k, v in sums.items()})
        history.append(record)
        if log is not None:
            log(record)
        if on_epoch is not None:
            on_epoch(net, record)

    state = ModelState(
        params={n: p.data.copy() for n, p in net.named_parameters()},
        adam_m={n: m.copy() for n, m in opt.m.items()},
        adam_v={n: v.copy() for n, v in opt.v.items()},
        adam_t=opt.t,
        epoch=tc.epochs,
        config_digest=cfg.digest(),
    )
    return net, state, history


def load_into(net, state):
    """Copy checkpoint parameters into a freshly built network."""
    named = dict(net.named_parameters())
    missing = set(named) ^ set(state.params)
    if missing:
        raise ValueError(f"parameter names do not match the checkpoint: {sorted(missing)[:4]}")
    for name, arr in state.params.items():
        if named[name].data.shape != arr.shape:
            raise ValueError(f"shape mismatch for {name}")
        named[name].data[:] = arr
    return net


def predict_depth(net, rgb):
    """Inference helper: final full-resolution depth as an (H, W) array."""
    out = net.predict(T.Tensor(np.asarray(rgb).transpose(2, 0, 1)[None]))
    return out["final"]["depths"][0].data[0, 0].copy()
