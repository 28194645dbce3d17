"""Synthetic scene generator and depth-domain transforms.

Scenes compose a slanted background, rectangular slabs, box fronts, and
sphere caps by z-buffering, then add a low-amplitude undulation field and
shade with a Lambertian model over a band-limited albedo texture.

The undulation is not cosmetic: an exactly flat surface has a second
derivative at floating-point noise level, which makes its unit-normalized
curvature vector pure noise.  Generated scenes are therefore rejected and
redrawn until the discrete curvature norm stays above CURVATURE_FLOOR at
every pixel, keeping the normalization well conditioned for the invariance
properties this package is built around.
"""

from dataclasses import asdict, dataclass

import numpy as np

from . import filters, saliency

CURVATURE_FLOOR = 1e-4
_MIN_KEYPOINTS = 22
_MAX_ATTEMPTS = 40


@dataclass
class SceneSpec:
    n_planes: int = 2
    n_spheres: int = 2
    n_boxes: int = 1
    depth_range: tuple = (2.0, 6.0)

    def total_primitives(self):
        return self.n_planes + self.n_spheres + self.n_boxes


@dataclass
class Scene:
    rgb: np.ndarray        # (H, W, 3) in [0, 1]
    depth: np.ndarray      # (H, W) metres, positive
    valid: np.ndarray      # (H, W) bool
    descriptor: dict

    @property
    def shape(self):
        return self.depth.shape


def _rand_rect(rng, h, w, min_frac=0.15, max_frac=0.6):
    rh = int(rng.uniform(min_frac, max_frac) * h)
    rw = int(rng.uniform(min_frac, max_frac) * w)
    rh, rw = max(rh, 4), max(rw, 4)
    r0 = int(rng.integers(0, h - rh + 1))
    c0 = int(rng.integers(0, w - rw + 1))
    return r0, c0, rh, rw


def _bilinear_resize(img, h, w):
    hs, ws = img.shape
    ys = np.linspace(0, hs - 1, h)
    xs = np.linspace(0, ws - 1, w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, hs - 1)
    x1 = np.minimum(x0 + 1, ws - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def _attempt_scene(rng, h, w, spec):
    zmin, zmax = spec.depth_range
    span = zmax - zmin
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)

    # background: gently slanted far plane
    bg_z0 = rng.uniform(zmin + 0.7 * span, zmax)
    bg_sx = rng.uniform(-0.012, 0.012)
    bg_sy = rng.uniform(-0.012, 0.012)
    depth = bg_z0 + bg_sx * (xs - w / 2) + bg_sy * (ys - h / 2)
    seg = np.zeros((h, w), dtype=np.int64)
    primitives = [{"kind": "background", "z0": bg_z0, "sx": bg_sx, "sy": bg_sy}]

    def place(layer_depth, params):
        nonlocal depth, seg
        closer = layer_depth < depth
        depth = np.where(closer, layer_depth, depth)
        seg = np.where(closer, len(primitives), seg)
        primitives.append(params)

    for _ in range(spec.n_planes):
        r0, c0, rh, rw = _rand_rect(rng, h, w)
        z0 = rng.uniform(zmin + 0.15 * span, zmax - 0.1 * span)
        sx = rng.uniform(-0.02, 0.02)
        sy = rng.uniform(-0.02, 0.02)
        layer = np.full((h, w), np.inf)
        patch = z0 + sx * (xs - c0) + sy * (ys - r0)
        region = (ys >= r0) & (ys < r0 + rh) & (xs >= c0) & (xs < c0 + rw)
        layer[region] = patch[region]
        place(layer, {"kind": "plane", "r0": r0, "c0": c0, "rh": rh, "rw": rw,
                      "z0": z0, "sx": sx, "sy": sy})

    for _ in range(spec.n_spheres):
        r_px = rng.uniform(min(h, w) * 0.12, min(h, w) * 0.3)
        cy = rng.uniform(r_px, h - r_px)
        cx = rng.uniform(r_px, w - r_px)
        big_r = rng.uniform(1.15, 3.0) * r_px
        z_apex = rng.uniform(zmin + 0.1 * span, zmax - 0.3 * span)
        rho2 = (xs - cx) ** 2 + (ys - cy) ** 2
        layer = np.full((h, w), np.inf)
        inside = rho2 <= r_px**2
        layer[inside] = z_apex + big_r - np.sqrt(big_r**2 - rho2[inside])
        place(layer, {"kind": "sphere", "cy": cy, "cx": cx, "r_px": r_px,
                      "big_r": big_r, "z_apex": z_apex})

    for _ in range(spec.n_boxes):
        r0, c0, rh, rw = _rand_rect(rng, h, w, 0.1, 0.4)
        z0 = rng.uniform(zmin + 0.1 * span, zmax - 0.2 * span)
        layer = np.full((h, w), np.inf)
        region = (ys >= r0) & (ys < r0 + rh) & (xs >= c0) & (xs < c0 + rw)
        layer[region] = z0
        place(layer, {"kind": "box", "r0": r0, "c0": c0, "rh": rh, "rw": rw, "z0": z0})

    # undulation: three plane waves keep the curvature norm away from zero
    waves = []
    und = np.zeros((h, w))
    for _ in range(3):
        period = rng.uniform(10.0, 22.0)
        theta = rng.uniform(0.0, np.pi)
        amp = rng.uniform(0.05, 0.10)
        phase = rng.uniform(0.0, 2 * np.pi)
        omega = 2 * np.pi / period
        und += amp * np.sin(omega * (np.cos(theta) * xs + np.sin(theta) * ys) + phase)
        waves.append({"period": period, "theta": theta, "amp": amp, "phase": phase})
    depth = depth + und

    # shading
    zy, zx = np.gradient(depth)
    nrm = np.sqrt(zx**2 + zy**2 + 1.0)
    light = np.array([rng.uniform(-0.45, 0.45), rng.uniform(-0.45, 0.45), 1.0])
    light /= np.linalg.norm(light)
    lambert = np.clip((-zx * light[0] - zy * light[1] + light[2]) / nrm, 0.0, 1.0)

    prim_tint = rng.uniform(0.45, 1.0, size=(len(primitives), 3))

    # bead-like albedo disks: unambiguous blobs for the keypoint detector,
    # and their radius scales inversely with depth, giving the images a
    # perspective-style size cue that makes absolute depth recoverable
    n_beads = int(rng.integers(30, 44))
    beads = np.ones((h, w))
    for _ in range(n_beads):
        by, bx = rng.uniform(3, h - 3), rng.uniform(3, w - 3)
        rad = np.clip(7.5 / depth[int(by), int(bx)], 1.1, 4.0)
        gain = rng.choice([rng.uniform(0.15, 0.4), rng.uniform(1.9, 2.8)])
        blob = np.exp(-((ys - by) ** 2 + (xs - bx) ** 2) / (2 * rad**2))
        beads *= 1.0 + (gain - 1.0) * blob

    rgb = np.empty((h, w, 3))
    for ch in range(3):
        coarse = _bilinear_resize(rng.uniform(0.3, 1.0, size=(6, 6)), h, w)
        mid = _bilinear_resize(rng.uniform(-0.28, 0.28, size=(16, 16)), h, w)
        albedo = np.clip((coarse + mid) * beads, 0.1, 1.3) * prim_tint[seg, ch]
        rgb[:, :, ch] = np.clip(albedo * (0.25 + 0.75 * lambert), 0.0, 1.0)

    return depth, rgb, primitives, waves, n_beads


_BANK_CACHE = {}


def min_curvature_norm(depth, sigma=1.0):
    """Smallest per-pixel norm of the discrete second-derivative field."""
    if sigma not in _BANK_CACHE:
        _BANK_CACHE[sigma] = filters.build_bank(sigma)
    field = filters.hessian_field(np.asarray(depth, dtype=np.float64), _BANK_CACHE[sigma]).data
    return float(np.sqrt((field**2).sum(axis=1)).min())


def generate(seed, height=64, width=64, spec=None):
    """Deterministically generate one scene; see the module docstring."""
    if spec is None:
        spec = SceneSpec()
    if spec.total_primitives() == 0:
        raise ValueError("scene spec must request at least one primitive")
    for attempt in range(_MAX_ATTEMPTS):
        rng = np.random.default_rng([attempt, seed, height, width])
        depth, rgb, primitives, waves, n_beads = _attempt_scene(rng, height, width, spec)
        # snap to the float32 grid so PFM round trips are lossless
        depth = np.float32(depth).astype(np.float64)
        rgb = np.float32(rgb).astype(np.float64)
        if depth.min() <= 0.05:
            continue
        if min_curvature_norm(depth) < CURVATURE_FLOOR:
            continue
        gray = rgb @ np.array([0.299, 0.587, 0.114])
        need = max(8, int(_MIN_KEYPOINTS * (height * width) / 4096.0))
        if len(saliency.detect_keypoints(gray)) < need:
            continue
        descriptor = {
            "seed": int(seed),
            "height": int(height),
            "width": int(width),
            "spec": asdict(spec),
            "attempt": attempt,
            "primitives": primitives,
            "waves": waves,
            "n_beads": n_beads,
        }
        return Scene(rgb=rgb, depth=depth, valid=np.ones((height, width), dtype=bool),
                     descriptor=descriptor)
    raise RuntimeError(f"could not generate an identifiable scene for seed {seed}")


def flat_plane_scene(depth_value=2.0, height=32, width=32):
    """Degenerate scene: one fronto-parallel plane at constant depth under
    flat gray shading.  Random generation never produces this (flat surfaces
    have unidentifiable normalized curvature); it exists for boundary tests."""
    depth = np.full((height, width), float(depth_value))
    rgb = np.full((height, width, 3), 0.5)
    descriptor = {"kind": "flat-plane", "depth": float(depth_value),
                  "height": height, "width": width}
    return Scene(rgb=rgb, depth=depth, valid=np.ones((height, width), dtype=bool),
                 descriptor=descriptor)


def regenerate(descriptor):
    """Reproduce a scene exactly from its descriptor."""
    spec = SceneSpec(**{k: tuple(v) if isinstance(v, list) else v
                        for k, v in descriptor["spec"].items()})
    return generate(descriptor["seed"], descriptor["height"], descriptor["width"], spec)


def gbr_transform(depth, a, b, c, e, valid=None):
    """Depth-domain scaling plus shear: d'(x, y) = a*d + b*x + c*y + e.

    x is the column index and y the row index, both in pixels.  Positivity
    of the result is the caller's concern; the validity mask passes through.
    """
    if a == 0:
        raise ValueError("gbr transform with a = 0 flattens the scene")
    depth = np.asarray(depth, dtype=np.float64)
    ys, xs = np.mgrid[0 : depth.shape[0], 0 : depth.shape[1]].astype(np.float64)
    out = a * depth + b * xs + c * ys + e
    if valid is None:
        return out
    return out, valid.copy()
