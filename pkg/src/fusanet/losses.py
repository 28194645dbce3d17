"""Training losses, differentiable end to end.

The family:
  hessian loss      rms chordal distance between unit-normalized curvature
                    fields; zero for any positive depth scaling + shear pair
  sparse loss       ratio of the rmse at guiding-point pixels to the rmse
                    over all valid pixels
  depth-confidence  log-error + mu*gradient + theta*normal - (psi/p)*confidence
  total             sum over scales i of gamma_i * (beta*DC + phi*S + lam*H)

All pixel means and rmse terms run over valid pixels only, which reduces to
the plain all-pixel definitions on fully valid maps.  Losses operate on one
map at a time; batching averages per-sample losses upstream.
"""

from dataclasses import dataclass, field

import numpy as np

from . import filters
from . import tensor as T
from .saliency import GuidingPointSet

_EPS = 1e-20
_LOG_OFFSET = 0.5


@dataclass
class LossWeights:
    """Coefficients of the loss family; defaults follow the training recipe
    (mu = theta = beta = psi = 1, lam = 0.01, phi = 5, five scales with
    geometrically decaying weights)."""

    mu: float = 1.0
    theta: float = 1.0
    beta: float = 1.0
    psi: float = 1.0
    lam: float = 0.01
    phi: float = 5.0
    gamma: tuple = (1.0, 0.75, 0.5, 0.25, 0.125)
    eps_h: float = _EPS
    use_sparse: bool = True
    use_hessian: bool = True

    @property
    def n_scales(self):
        return len(self.gamma)


@dataclass
class ScaleTerms:
    l_log: float = 0.0
    l_grad: float = 0.0
    l_norm: float = 0.0
    l_c: float = 0.0
    l_dc: float = 0.0
    l_s: float = 0.0
    l_h: float = 0.0
    n_points: int = 0


@dataclass
class LossReport:
    """Per-scale terms plus the combined total.

    `tensor` is the differentiable total (present when built by loss_total);
    the floats are detached snapshots for logging.  A scale with n_points = 0
    reports l_s = 0 from the empty-point protocol rather than from a true
    zero error.
    """

    total: float
    scales: list
    epoch: int
    tensor: object = field(default=None, repr=False)

    def to_lines(self):
        lines = [f"l_total {self.total:.12g}", f"epoch {self.epoch}"]
        for i, s in enumerate(self.scales, start=1):
            for name in ("l_dc", "l_s", "l_h", "l_log", "l_grad", "l_norm", "l_c"):
                lines.append(f"scale{i}.{name} {getattr(s, name):.12g}")
            lines.append(f"scale{i}.n_points {s.n_points}")
        return lines

    def recombine(self, weights):
        """Re-evaluate the total from the stored per-scale terms."""
        total = 0.0
        for g, s in zip(weights.gamma, self.scales):
            total += g * (weights.beta * s.l_dc + weights.phi * s.l_s + weights.lam * s.l_h)
        return total


def _as_map(x):
    x = T.as_tensor(x)
    if x.ndim == 2:
        x = T.reshape(x, (1, 1) + x.shape)
    if x.ndim != 4 or x.shape[0] != 1 or x.shape[1] != 1:
        raise ValueError(f"expected a single (H, W) map, got shape {x.shape}")
    return x


def _check_pair(pred, gt):
    pred, gt = _as_map(pred), _as_map(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and target {gt.shape} differ in shape")
    return pred, gt


def _mask_tensor(valid, shape):
    if valid is None:
        return None, shape[2] * shape[3]
    m = np.asarray(valid, dtype=np.float64).reshape(shape)
    count = int(m.sum())
    if count == 0:
        raise ValueError("no valid pixels")
    return T.Tensor(m), count


def _masked_mean(x, mask, count):
    if mask is None:
        return x.mean()
    return T.reduce_sum(T.mul(x, mask)) * (1.0 / count)


def loss_hessian(pred, gt, bank=None, valid=None):
    """rms chordal distance between the unit-normalized curvature fields."""
    pred, gt = _check_pair(pred, gt)
    hp = filters.normalize_hessian(filters.hessian_field(pred, bank))
    hg = filters.normalize_hessian(filters.hessian_field(gt, bank))
    diff = T.sub(hp, hg)
    chord2 = T.reduce_sum(T.mul(diff, diff), axes=1, keepdims=True)
    mask, count = _mask_tensor(valid, pred.shape)
    return T.sqrt(_masked_mean(chord2, mask, count))


def loss_sparse(pred, gt, points, valid=None):
    """rmse at guiding-point pixels over rmse at all valid pixels.

    An empty point set contributes 0 (the zero-point protocol); the caller's
    report distinguishes that case via its point count.
    """
    pred, gt = _check_pair(pred, gt)
    mask, count = _mask_tensor(valid, pred.shape)
    if len(points) == 0:
        return T.mul(pred.mean(), 0.0)
    points.check_bounds(pred.shape[2], pred.shape[3])
    at_points = T.gather_pixels(pred, points.rows, points.cols)
    num = T.sub(at_points, T.Tensor(points.depths)).rms()
    err = T.sub(pred, gt)
    if mask is None:
        den = err.rms()
    else:
        den = T.sqrt(T.reduce_sum(T.mul(T.mul(err, err), mask)) * (1.0 / count))
    return T.div(num, T.add(den, _EPS))


def _log_error_map(pred, gt):
    return T.ln(T.add(T.absolute(T.sub(pred, gt)), _LOG_OFFSET))


def loss_log(pred, gt, valid=None):
    """Mean over valid pixels of ln(|pred - gt| + 0.5)."""
    pred, gt = _check_pair(pred, gt)
    mask, count = _mask_tensor(valid, pred.shape)
    return _masked_mean(_log_error_map(pred, gt), mask, count)


def loss_grad(pred, gt, valid=None):
    """Log-penalised error of the spatial gradients of (pred - gt)."""
    pred, gt = _check_pair(pred, gt)
    grads = filters.spatial_gradients(T.sub(pred, gt))
    logs = T.ln(T.add(T.absolute(grads), _LOG_OFFSET))
    per_pixel = T.reduce_sum(logs, axes=1, keepdims=True)
    mask, count = _mask_tensor(valid, pred.shape)
    return _masked_mean(per_pixel, mask, count)


def loss_normal(pred, gt, valid=None):
    """Mean angular penalty 1 - <n_pred, n_gt> between surface normals."""
    pred, gt = _check_pair(pred, gt)
    np_, ng = filters.surface_normals(pred), filters.surface_normals(gt)
    dot = T.reduce_sum(T.mul(np_, ng), axes=1, keepdims=True)
    mask, count = _mask_tensor(valid, pred.shape)
    return _masked_mean(T.sub(1.0, dot), mask, count)


def loss_confidence(conf, pred, gt, epoch, valid=None):
    """Mean of c - c * ln(|pred - gt| + 0.5) over valid pixels.

    The caller applies the -psi/epoch weighting; epochs are 1-indexed so the
    1/p factor is defined from the first epoch on.
    """
    if epoch < 1:
        raise ValueError(f"epoch is 1-indexed, got {epoch}")
    pred, gt = _check_pair(pred, gt)
    conf = _as_map(conf)
    if conf.shape != pred.shape:
        raise ValueError(f"confidence {conf.shape} and prediction {pred.shape} differ")
    cmin, cmax = float(conf.data.min()), float(conf.data.max())
    if cmin < -1e-9 or cmax > 1 + 1e-9:
        raise ValueError(f"confidence must lie in [0, 1], got range [{cmin}, {cmax}]")
    per_pixel = T.sub(conf, T.mul(_log_error_map(pred, gt), conf))
    mask, count = _mask_tensor(valid, pred.shape)
    return _masked_mean(per_pixel, mask, count)


def _small(shape):
    return shape[2] < 3 or shape[3] < 3


def loss_dc(pred, gt, conf=None, weights=None, epoch=1, valid=None):
    """Depth-confidence combination; returns (tensor, ScaleTerms snapshot).

    On maps smaller than 3x3 the gradient and normal terms are undefined
    (no central difference) and contribute 0.  Without a confidence map the
    confidence term is 0.
    """
    weights = weights or LossWeights()
    pred, gt = _check_pair(pred, gt)
    terms = ScaleTerms()
    total = loss_log(pred, gt, valid)
    terms.l_log = float(total.data)
    if not _small(pred.shape):
        lg = loss_grad(pred, gt, valid)
        lnm = loss_normal(pred, gt, valid)
        terms.l_grad, terms.l_norm = float(lg.data), float(lnm.data)
        total = T.add(total, T.add(T.mul(lg, weights.mu), T.mul(lnm, weights.theta)))
    if conf is not None:
        lc = loss_confidence(conf, pred, gt, epoch, valid)
        terms.l_c = float(lc.data)
        total = T.sub(total, T.mul(lc, weights.psi / epoch))
    terms.l_dc = float(total.data)
    return total, terms


def build_pyramid(gt, valid, n_scales):
    """Ground-truth and validity pyramids by 2x2 averaging.

    A coarse pixel stays valid when at least half of its children were
    (fully valid maps stay fully valid at every scale).
    """
    gts, valids = [_as_map(gt)], [None if valid is None else np.asarray(valid, bool)]
    for _ in range(n_scales - 1):
        gts.append(T.downsample2x_avg(gts[-1]))
        v = valids[-1]
        if v is None:
            valids.append(None)
        else:
            vt = T.downsample2x_avg(T.Tensor(v.reshape((1, 1) + v.shape).astype(np.float64)))
            valids.append(vt.data[0, 0] >= 0.5)
    return gts, valids


def project_points(points, n_scales):
    sets = [points]
    for _ in range(n_scales - 1):
        sets.append(sets[-1].halved())
    return sets


def loss_total(preds, gt, confs=None, points=None, weights=None, epoch=1, valid=None,
               bank_sigma=1.0):
    """Combine per-scale losses into the weighted multi-scale total.

    preds: list of per-scale predictions, finest first, each half the
    previous extent.  The Hessian bank sigma halves with each scale (floored
    at 0.25) so each level measures curvature at a comparable physical scale;
    scales too small for a given term contribute 0 to it.
    """
    weights = weights or LossWeights()
    n = weights.n_scales
    if len(preds) != n:
        raise ValueError(f"expected {n} scales of predictions, got {len(preds)}")
    if confs is not None and len(confs) != n:
        raise ValueError(f"expected {n} scales of confidence maps, got {len(confs)}")
    if points is None:
        points = GuidingPointSet.empty()

    gts, valids = build_pyramid(gt, valid, n)
    point_sets = project_points(points, n)

    total = None
    scales = []
    for i in range(n):
        pred_i = _as_map(preds[i])
        if pred_i.shape != gts[i].shape:
            raise ValueError(
                f"scale {i + 1} prediction {pred_i.shape} does not match pyramid {gts[i].shape}"
            )
        if valids[i] is not None and not valids[i].any():
            # heavy augmentation can empty a coarse mask; that scale skips
            scales.append(ScaleTerms())
            if total is None:
                total = T.mul(pred_i.mean(), 0.0)
            continue
        conf_i = confs[i] if confs is not None else None
        dc, terms = loss_dc(pred_i, gts[i], conf_i, weights, epoch, valids[i])
        contrib = T.mul(dc, weights.beta)

        terms.n_points = len(point_sets[i])
        if weights.use_sparse:
            ls = loss_sparse(pred_i, gts[i], point_sets[i], valids[i])
            terms.l_s = float(ls.data)
            contrib = T.add(contrib, T.mul(ls, weights.phi))

        if weights.use_hessian:
            sigma_i = max(bank_sigma / 2.0**i, 0.25)
            bank_i = filters.build_bank(sigma_i)
            if min(pred_i.shape[2], pred_i.shape[3]) >= bank_i.extent:
                lh = loss_hessian(pred_i, gts[i], bank_i, valids[i])
                terms.l_h = float(lh.data)
                contrib = T.add(contrib, T.mul(lh, weights.lam))

        contrib = T.mul(contrib, weights.gamma[i])
        total = contrib if total is None else T.add(total, contrib)
        scales.append(terms)

    return LossReport(total=float(total.data), scales=scales, epoch=epoch, tensor=total)
