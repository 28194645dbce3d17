"""Depth evaluation metrics.

REL, sqREL, RMSE, thresholded accuracies, the scale-invariant log error
(variance of log errors, so any common scaling of prediction and target
cancels), and MAE/RMSE of inverse depths.
"""

from dataclasses import dataclass

import numpy as np

CSV_COLUMNS = ("rel", "sq_rel", "rmse", "delta1", "delta2", "delta3",
               "si", "imae", "irmse", "n_valid")


@dataclass
class MetricReport:
    rel: float
    sq_rel: float
    rmse: float
    delta1: float
    delta2: float
    delta3: float
    si: float
    imae: float
    irmse: float
    n_valid: int

    def to_lines(self):
        return [f"{k} {getattr(self, k):.9g}" for k in CSV_COLUMNS]

    @staticmethod
    def csv_header():
        return ",".join(CSV_COLUMNS)

    def csv_row(self):
        vals = [f"{getattr(self, k):.9g}" for k in CSV_COLUMNS[:-1]]
        return ",".join(vals + [str(self.n_valid)])


def evaluate(pred, gt, cap=None, valid=None):
    """Compare a predicted depth map against ground truth.

    Valid pixels are those with gt > 0, within the optional depth cap, and
    inside the optional validity mask.  Predictions are clipped below at
    1e-12 for the log/inverse metrics.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and target {gt.shape} differ in shape")
    mask = gt > 0
    if cap is not None:
        mask &= gt <= cap
    if valid is not None:
        mask &= np.asarray(valid, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("no valid pixels to evaluate")
    p = np.clip(pred[mask], 1e-12, None)
    g = gt[mask]

    err = p - g
    ratio = np.maximum(p / g, g / p)
    log_err = np.log(p) - np.log(g)
    inv_err = 1.0 / p - 1.0 / g
    return MetricReport(
        rel=float(np.mean(np.abs(err) / g)),
        sq_rel=float(np.mean(err**2 / g)),
        rmse=float(np.sqrt(np.mean(err**2))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25**2)),
        delta3=float(np.mean(ratio < 1.25**3)),
        si=float(np.mean(log_err**2) - np.mean(log_err) ** 2),
        imae=float(np.mean(np.abs(inv_err))),
        irmse=float(np.sqrt(np.mean(inv_err**2))),
        n_valid=n,
    )
