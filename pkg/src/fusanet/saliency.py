"""Keypoints, guiding points, and the saliency head.

Training-time 3D guiding points come from difference-of-Gaussians scale-space
extrema (keypoint locations only; no descriptors or orientations) looked up
in the ground-truth depth map.  At the second pass the learned saliency head
turns confidence + fusion features + depth into a salient-point set of its
own.  Point selection from the saliency map is a hard top-K with non-maximum
suppression and is deliberately not differentiable; the map itself stays in
the graph.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import Conv2d, Module

MFE_DILATIONS = (3, 5, 7, 9, 15, 16, 21)


# ---------------------------------------------------------------------------
# guiding point sets
# ---------------------------------------------------------------------------

@dataclass
class GuidingPointSet:
    """Pixel-anchored 3D points: integer (row, col) plus a metric depth."""

    rows: np.ndarray
    cols: np.ndarray
    depths: np.ndarray

    @classmethod
    def empty(cls):
        z = np.zeros(0, dtype=np.int64)
        return cls(rows=z, cols=z.copy(), depths=np.zeros(0))

    @classmethod
    def from_arrays(cls, rows, cols, depths):
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        depths = np.asarray(depths, dtype=np.float64)
        if not (len(rows) == len(cols) == len(depths)):
            raise ValueError("rows, cols, depths must have equal lengths")
        if len(rows) and (not np.isfinite(depths).all() or depths.min() <= 0):
            raise ValueError("point depths must be positive and finite")
        if len(rows) != len({(int(r), int(c)) for r, c in zip(rows, cols)}):
            raise ValueError("duplicate (row, col) in point set")
        return cls(rows=rows, cols=cols, depths=depths)

    def __len__(self):
        return len(self.rows)

    def check_bounds(self, h, w):
        if len(self) and (
            self.rows.min() < 0 or self.rows.max() >= h
            or self.cols.min() < 0 or self.cols.max() >= w
        ):
            raise ValueError(f"point coordinates fall outside a {h}x{w} image")

    def halved(self):
        """Project to the next-coarser scale: floor-halve coordinates and
        average the depths of points that collide."""
        if len(self) == 0:
            return GuidingPointSet.empty()
        r2, c2 = self.rows // 2, self.cols // 2
        acc = {}
        for r, c, d in zip(r2, c2, self.depths):
            acc.setdefault((int(r), int(c)), []).append(float(d))
        keys = sorted(acc)
        return GuidingPointSet(
            rows=np.array([k[0] for k in keys], dtype=np.int64),
            cols=np.array([k[1] for k in keys], dtype=np.int64),
            depths=np.array([sum(acc[k]) / len(acc[k]) for k in keys]),
        )


def rasterize(points, h, w):
    """Point set -> (sparse depth map, binary mask), both (H, W) float64."""
    points.check_bounds(h, w)
    depth = np.zeros((h, w))
    mask = np.zeros((h, w))
    depth[points.rows, points.cols] = points.depths
    mask[points.rows, points.cols] = 1.0
    return depth, mask


# ---------------------------------------------------------------------------
# difference-of-Gaussians keypoint detection
# ---------------------------------------------------------------------------

@dataclass
class Keypoint:
    row: float
    col: float
    scale: float
    response: float


def _gaussian_blur(img, sigma):
    radius = max(1, int(math.ceil(3.0 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(xs**2) / (2.0 * sigma**2))
    k /= k.sum()
    h, w = img.shape
    pad = np.pad(img, ((0, 0), (radius, radius)), mode="edge")
    out = np.zeros_like(img)
    for i, kv in enumerate(k):
        out += kv * pad[:, i : i + w]
    pad = np.pad(out, ((radius, radius), (0, 0)), mode="edge")
    out = np.zeros_like(img)
    for i, kv in enumerate(k):
        out += kv * pad[i : i + h, :]
    return out


def _parabolic_offset(fm, f0, fp):
    den = fp - 2.0 * f0 + fm
    if den == 0.0:
        return 0.0
    return float(np.clip(-0.5 * (fp - fm) / den, -0.5, 0.5))


def _upsample2x(img):
    # half-pixel-centre grid: flipping the input mirrors the output exactly
    h, w = img.shape
    ys = np.clip((np.arange(2 * h) + 0.5) / 2.0 - 0.5, 0.0, h - 1.0)
    xs = np.clip((np.arange(2 * w) + 0.5) / 2.0 - 0.5, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def _downsample2x_avg(img):
    h, w = img.shape
    img = img[: h - h % 2, : w - w % 2]
    return img.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def detect_keypoints(img, octaves=3, scales_per_octave=3, sigma0=1.6,
                     contrast_thresh=0.03, edge_ratio=10.0):
    """DoG scale-space extrema of a grayscale image in [0, 1].

    The image is first doubled (the customary -1 octave) so that fine blobs
    peak inside the eligible scale levels.  3x3x3 extremum test, contrast
    threshold on |DoG|, edge rejection through the trace/determinant ratio
    of the 2x2 spatial Hessian, parabolic subpixel refinement.  Returns
    keypoints sorted by |response| descending (ties broken by row, then col).
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"detector expects a grayscale (H, W) image, got shape {img.shape}")
    if img.shape[0] < 32 or img.shape[1] < 32:
        raise ValueError(f"image {img.shape} too small for keypoint detection (min 32x32)")

    k = 2.0 ** (1.0 / scales_per_octave)
    edge_bound = (edge_ratio + 1.0) ** 2 / edge_ratio
    found = []
    base = _upsample2x(img)
    for octave in range(octaves):
        if base.shape[0] < 8 or base.shape[1] < 8:
            break
        gauss = [_gaussian_blur(base, sigma0 * k**level)
                 for level in range(scales_per_octave + 3)]
        dogs = [gauss[i + 1] - gauss[i] for i in range(scales_per_octave + 2)]
        stack = np.stack(dogs)
        h, w = base.shape
        for level in range(1, scales_per_octave + 1):
            d = stack[level]
            cube = stack[level - 1 : level + 2]
            centre = d[1:-1, 1:-1]
            strong = np.abs(centre) > contrast_thresh
            if not strong.any():
                continue
            neigh_max = np.full_like(centre, -np.inf)
            neigh_min = np.full_like(centre, np.inf)
            for dl in range(3):
                for dr in range(3):
                    for dc in range(3):
                        if dl == 1 and dr == 1 and dc == 1:
                            continue
                        sl = cube[dl, dr : dr + h - 2, dc : dc + w - 2]
                        neigh_max = np.maximum(neigh_max, sl)
                        neigh_min = np.minimum(neigh_min, sl)
            is_ext = strong & ((centre > neigh_max) | (centre < neigh_min))
            for r, c in zip(*np.nonzero(is_ext)):
                rr, cc = r + 1, c + 1
                dxx = d[rr, cc + 1] - 2 * d[rr, cc] + d[rr, cc - 1]
                dyy = d[rr + 1, cc] - 2 * d[rr, cc] + d[rr - 1, cc]
                dxy = 0.25 * (d[rr + 1, cc + 1] - d[rr + 1, cc - 1]
                              - d[rr - 1, cc + 1] + d[rr - 1, cc - 1])
                tr, det = dxx + dyy, dxx * dyy - dxy * dxy
                if det <= 0 or tr * tr / det >= edge_bound:
                    continue
                dr_off = _parabolic_offset(d[rr - 1, cc], d[rr, cc], d[rr + 1, cc])
                dc_off = _parabolic_offset(d[rr, cc - 1], d[rr, cc], d[rr, cc + 1])
                to_input = 2.0**octave / 2.0  # octave 0 is the doubled image
                found.append(Keypoint(
                    row=(rr + dr_off) * to_input,
                    col=(cc + dc_off) * to_input,
                    scale=sigma0 * k**level * to_input,
                    response=float(d[rr, cc]),
                ))
        base = _downsample2x_avg(base)

    found.sort(key=lambda kp: (-abs(kp.response), kp.row, kp.col))
    return found


def sample_guiding_points(keypoints, gt_depth, k, valid=None):
    """Read ground-truth depths at the top-K keypoint pixels.

    Keypoints landing outside the map, on invalid pixels, on non-positive
    depths, or on an already-taken pixel are skipped in favour of the next
    strongest.  An empty result is legal (the zero-point training protocol).
    """
    gt_depth = np.asarray(gt_depth, dtype=np.float64)
    h, w = gt_depth.shape
    rows, cols, depths = [], [], []
    taken = set()
    for kp in keypoints:
        if len(rows) >= k:
            break
        r, c = int(round(kp.row)), int(round(kp.col))
        if not (0 <= r < h and 0 <= c < w) or (r, c) in taken:
            continue
        if valid is not None and not valid[r, c]:
            continue
        if gt_depth[r, c] <= 0 or not np.isfinite(gt_depth[r, c]):
            continue
        taken.add((r, c))
        rows.append(r)
        cols.append(c)
        depths.append(gt_depth[r, c])
    if not rows:
        return GuidingPointSet.empty()
    return GuidingPointSet(np.array(rows, dtype=np.int64),
                           np.array(cols, dtype=np.int64),
                           np.array(depths))


# ---------------------------------------------------------------------------
# the saliency head
# ---------------------------------------------------------------------------

class MultiScaleFeatureBank(Module):
    """One 3x3 conv, one 5x5 conv, and seven dilated 3x3 convs whose outputs
    are concatenated channel-wise; spatial shape is preserved."""

    def __init__(self, cin, branch_channels, rng):
        self.branch_channels = branch_channels
        self.branches = [
            Conv2d(cin, branch_channels, 3, rng),
            Conv2d(cin, branch_channels, 5, rng),
        ] + [
            Conv2d(cin, branch_channels, 3, rng, dilation=d, padding=d)
            for d in MFE_DILATIONS
        ]

    @property
    def out_channels(self):
        return len(self.branches) * self.branch_channels

    def __call__(self, x):
        return T.concat([T.relu(br(x)) for br in self.branches], axis=1)


class SaliencyHead(Module):
    """Confidence-guided salient-point generator.

    The confidence map is concatenated separately with the fusion features
    and with the depth map; each stack runs through a multi-dilation feature
    bank, the two results are merged by elementwise product after 1x1 convs,
    and a final 1x1 conv + sigmoid yields the saliency map.
    """

    def __init__(self, feature_channels, rng, branch_channels=2):
        self.mfe_features = MultiScaleFeatureBank(feature_channels + 1, branch_channels, rng)
        self.mfe_depth = MultiScaleFeatureBank(2, branch_channels, rng)
        mixed = self.mfe_features.out_channels
        self.mix_features = Conv2d(mixed, mixed, 1, rng)
        self.mix_depth = Conv2d(mixed, mixed, 1, rng)
        self.out = Conv2d(mixed, 1, 1, rng)

    def saliency_map(self, conf, features, depth):
        conf, features, depth = T.as_tensor(conf), T.as_tensor(features), T.as_tensor(depth)
        a = self.mfe_features(T.concat([conf, features], axis=1))
        b = self.mfe_depth(T.concat([conf, depth], axis=1))
        merged = T.mul(self.mix_features(a), self.mix_depth(b))
        return T.sigmoid(self.out(merged))

    def __call__(self, conf, features, depth, k, nms_radius=5):
        """Return (points, saliency map).  Point extraction reads depths off
        the depth input and is a hard, non-differentiable readout."""
        if k < 0:
            raise ValueError(f"point budget must be non-negative, got {k}")
        smap = self.saliency_map(conf, features, depth)
        points = select_salient_points(smap.data[0, 0], depth.data[0, 0], k, nms_radius)
        return points, smap


def select_salient_points(saliency, depth, k, nms_radius=5):
    """Greedy top-K maxima of the saliency map with Chebyshev-distance NMS.

    Returned points are pairwise at least `nms_radius` apart in Chebyshev
    distance; depths are read from `depth` at the selected pixels.
    """
    if k == 0:
        return GuidingPointSet.empty()
    h, w = saliency.shape
    flat = saliency.reshape(-1)
    rr, cc = np.divmod(np.arange(h * w), w)
    order = np.lexsort((cc, rr, -flat))
    rows, cols, depths = [], [], []
    cells = {}
    cell = max(1, nms_radius)
    for idx in order:
        if len(rows) >= k:
            break
        r, c = int(rr[idx]), int(cc[idx])
        key = (r // cell, c // cell)
        clash = False
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                for pr, pc in cells.get((key[0] + dy, key[1] + dx), ()):
                    if max(abs(pr - r), abs(pc - c)) < nms_radius:
                        clash = True
                        break
                if clash:
                    break
            if clash:
                break
        if clash:
            continue
        d = float(depth[r, c])
        if d <= 0 or not np.isfinite(d):
            continue
        cells.setdefault(key, []).append((r, c))
        rows.append(r)
        cols.append(c)
        depths.append(d)
    if not rows:
        return GuidingPointSet.empty()
    return GuidingPointSet(np.array(rows, dtype=np.int64),
                           np.array(cols, dtype=np.int64),
                           np.array(depths))
