"""Fixed Gaussian-derivative filtering for depth maps.

The second-derivative bank realizes the per-pixel field (z_xx, z_xy, z_yy)
whose unit normalization is invariant to depth scalings and shears; the
first-derivative helpers feed the gradient and surface-normal loss terms.

Kernels are sampled from the analytic Gaussian derivatives, mean-subtracted
so they annihilate constants exactly, then rescaled so the response to the
matching monomial (x^2/2, x*y, y^2/2) is exactly 1.  That calibration makes
the filter unit-true: a depth map in metres yields curvature in metres per
squared pixel.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T

EPS = 1e-20


@dataclass
class GaussianDerivativeBank:
    """Calibrated 2D kernels for the three independent second derivatives."""

    sigma: float
    radius: int
    g_xx: np.ndarray = field(repr=False)
    g_xy: np.ndarray = field(repr=False)
    g_yy: np.ndarray = field(repr=False)

    @property
    def extent(self):
        return 2 * self.radius + 1

    def stacked(self):
        """Kernels as a (3, 1, k, k) conv weight, channel order xx, xy, yy."""
        return np.stack([self.g_xx, self.g_xy, self.g_yy])[:, None]


def build_bank(sigma=1.0):
    """Sample, zero-mean, and monomial-calibrate the second-derivative bank.

    x increases along columns and y along rows.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    radius = int(math.ceil(4.0 * sigma))
    coords = np.arange(-radius, radius + 1, dtype=np.float64)
    xx, yy = np.meshgrid(coords, coords)  # xx varies along columns
    g = np.exp(-(xx**2 + yy**2) / (2.0 * sigma**2))
    s2 = sigma**2
    k_xx = g * (xx**2 - s2) / s2**2
    k_xy = g * (xx * yy) / s2**2
    k_yy = g * (yy**2 - s2) / s2**2

    def calibrate(k, main, cross):
        """Correct by a combination of {1, main, cross} patterns so the
        kernel sums to 0, responds 1 to its own monomial, and 0 to the cross
        monomial (sampled Gaussians only satisfy these approximately).
        Two rounds push the residuals to rounding level."""
        basis = [np.ones_like(k), main, cross]
        want = np.array([0.0, 1.0, 0.0])
        gram = np.array([[(gi * gj).sum() for gj in basis] for gi in basis])
        for _ in range(2):
            resid = np.array([(k * gi).sum() for gi in basis]) - want
            coeffs = np.linalg.solve(gram, resid)
            k = k - sum(cc * gi for cc, gi in zip(coeffs, basis))
        return k

    def calibrate_mixed(k, main):
        k = k - k.mean()
        return k / float((k * main).sum())

    g_xx = calibrate(k_xx, xx**2 / 2.0, yy**2 / 2.0)
    g_xy = calibrate_mixed(k_xy, xx * yy)
    g_yy = calibrate(k_yy, yy**2 / 2.0, xx**2 / 2.0)
    return GaussianDerivativeBank(sigma=sigma, radius=radius, g_xx=g_xx, g_xy=g_xy, g_yy=g_yy)


def _as_map4d(z):
    """Accept (H, W) or (N, 1, H, W) tensors; return rank-4 plus a flag."""
    z = T.as_tensor(z)
    if z.ndim == 2:
        return T.reshape(z, (1, 1) + z.shape), True
    if z.ndim == 4 and z.shape[1] == 1:
        return z, False
    raise ValueError(f"expected an (H, W) or (N, 1, H, W) depth map, got shape {z.shape}")


def hessian_field(z, bank=None):
    """Raw per-pixel (z_xx, z_xy, z_yy) as an (N, 3, H, W) tensor.

    Borders are padded by odd reflection, which continues planes exactly, so
    the field of any plane is zero at every pixel and depth shears stay
    invisible to the normalized field right up to the image edge.  Replicate
    padding would kink ramps at the border and fabricate curvature there.
    Differentiable in z.
    """
    if bank is None:
        bank = build_bank()
    z4, _ = _as_map4d(z)
    h, w = z4.shape[2], z4.shape[3]
    if h < bank.extent or w < bank.extent:
        raise ValueError(
            f"map {h}x{w} is smaller than the {bank.extent}x{bank.extent} filter bank"
        )
    padded = T.pad_reflect_odd(z4, bank.radius)
    return T.conv2d(padded, T.Tensor(bank.stacked()))


def normalize_hessian(raw, eps=EPS):
    """Divide the per-pixel field by (its Euclidean norm + eps); norm <= 1."""
    raw = T.as_tensor(raw)
    if raw.ndim != 4 or raw.shape[1] != 3:
        raise ValueError(f"expected an (N, 3, H, W) field, got shape {raw.shape}")
    norm = T.sqrt(T.reduce_sum(T.mul(raw, raw), axes=1, keepdims=True))
    return T.div(raw, T.add(norm, eps))


def spatial_gradients(z):
    """Central-difference (z_x, z_y) with replicate borders, as (N,2,H,W)."""
    z4, _ = _as_map4d(z)
    if z4.shape[2] < 3 or z4.shape[3] < 3:
        raise ValueError(f"spatial gradients need extents >= 3, got {z4.shape[2]}x{z4.shape[3]}")
    kx = np.zeros((1, 1, 3, 3))
    kx[0, 0, 1, 0], kx[0, 0, 1, 2] = -0.5, 0.5
    ky = np.zeros((1, 1, 3, 3))
    ky[0, 0, 0, 1], ky[0, 0, 2, 1] = -0.5, 0.5
    padded = T.pad_replicate(z4, 1)
    k = T.Tensor(np.concatenate([kx, ky], axis=0))
    return T.conv2d(padded, k)


def surface_normals(z):
    """Unit height-field normals (-z_x, -z_y, 1)/|.| as (N, 3, H, W)."""
    grads = spatial_gradients(z)
    n, _, h, w = grads.shape
    ones = T.Tensor(np.ones((n, 1, h, w)))
    un = T.concat([T.neg(grads), ones], axis=1)
    norm = T.sqrt(T.reduce_sum(T.mul(un, un), axes=1, keepdims=True))
    return T.div(un, norm)
