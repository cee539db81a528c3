"""Segmentation accuracy and generation-quality metrics.

Distances are Euclidean in pixel units, computed with an exact distance
transform. When either mask is empty the distance metrics are undefined;
they then return the image diagonal and the report records the metric name
in ``undefined``.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

SEG_COLUMNS = ("dice", "hd", "g2re", "r2ge", "sensitivity", "precision")


def _pair(pred, gt):
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return pred, gt


def _diagonal(shape):
    return float(np.sqrt(sum(s * s for s in shape)))


def _dist_to(mask):
    """Distance from every pixel to the nearest True pixel of ``mask``."""
    return ndimage.distance_transform_edt(~mask)


def dice(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    denom = pred.sum() + gt.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(pred, gt).sum() / denom)


def directed_errors(pred, gt):
    """(G2RE, R2GE): mean distance gt->pred and pred->gt."""
    pred, gt = _pair(pred, gt)
    if not pred.any() or not gt.any():
        d = _diagonal(pred.shape)
        return d, d
    return float(_dist_to(pred)[gt].mean()), float(_dist_to(gt)[pred].mean())


def hausdorff(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    if not pred.any() or not gt.any():
        return _diagonal(pred.shape)
    return float(max(_dist_to(pred)[gt].max(), _dist_to(gt)[pred].max()))


def sensitivity_precision(pred, gt, tolerance_px=2.0):
    """Tolerance-based recall and precision for thin structures.

    Returns 0 for a ratio whose denominator is empty (see :func:`seg_metrics`
    for the flag).
    """
    pred, gt = _pair(pred, gt)
    if not pred.any() or not gt.any():
        return 0.0, 0.0
    sens = float((_dist_to(pred)[gt] <= tolerance_px).mean())
    prec = float((_dist_to(gt)[pred] <= tolerance_px).mean())
    return sens, prec


@dataclass
class SegMetricsReport:
    dice: float
    hd: float
    g2re: float
    r2ge: float
    sensitivity: float
    precision: float
    undefined: tuple = ()

    def row(self):
        return [getattr(self, c) for c in SEG_COLUMNS]

    @classmethod
    def mean(cls, reports):
        vals = np.array([r.row() for r in reports], dtype=np.float64).mean(0)
        undef = tuple(sorted({u for r in reports for u in r.undefined}))
        return cls(*map(float, vals), undefined=undef)


def seg_metrics(pred, gt, tolerance_px=2.0) -> SegMetricsReport:
    pred, gt = _pair(pred, gt)
    undefined = []
    if not pred.any() or not gt.any():
        undefined += ["hd", "g2re", "r2ge"]
    if not gt.any():
        undefined.append("sensitivity")
    if not pred.any():
        undefined.append("precision")
    g2re, r2ge = directed_errors(pred, gt)
    sens, prec = sensitivity_precision(pred, gt, tolerance_px)
    return SegMetricsReport(dice(pred, gt), hausdorff(pred, gt), g2re, r2ge, sens, prec, tuple(undefined))


def video_metrics(pred_masks, gt_masks, tolerance_px=2.0) -> SegMetricsReport:
    """Frame-averaged metrics for one video."""
    return SegMetricsReport.mean([seg_metrics(p, g, tolerance_px) for p, g in zip(pred_masks, gt_masks)])


def write_seg_report(path, reports, aggregate=None):
    """CSV with one row per video and the aggregate (mean) row last."""
    aggregate = aggregate or SegMetricsReport.mean(reports)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SEG_COLUMNS)
        for r in list(reports) + [aggregate]:
            w.writerow([f"{v:.6g}" for v in r.row()])
    return aggregate


# -- generation quality -------------------------------------------------------------------

@dataclass
class MeanStd:
    mean: float
    std: float
    values: np.ndarray = field(default=None, repr=False)


def flatten_features(samples):
    return np.asarray([np.asarray(s, dtype=np.float64).ravel() for s in samples])


def _pairwise(a, b):
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2 * a @ b.T
    return np.sqrt(np.maximum(d2, 0.0))


def _nn_exact(a, b, exclude_self=False):
    """Nearest-neighbour distances from rows of ``a`` to rows of ``b``.

    Exact zero distances are preserved (the Gram expansion can leave tiny
    residues for identical rows).
    """
    d = _pairwise(a, b)
    same = (a[:, None, :] == b[None, :, :]).all(-1)
    d[same] = 0.0
    if exclude_self:
        np.fill_diagonal(d, np.inf)
    return d.min(1)


def reference_scale(train, feature_fn=flatten_features):
    """Mean leave-one-out nearest-neighbour distance within the training set."""
    f = feature_fn(train)
    if len(f) < 2:
        return 1.0
    return float(_nn_exact(f, f, exclude_self=True).mean())


def diversity_score(samples, feature_fn=flatten_features, scale=1.0) -> MeanStd:
    """Mean over samples of the (scaled) distance to the nearest other sample."""
    if len(samples) < 2:
        raise ValueError("diversity needs at least two samples")
    f = feature_fn(samples)
    d = _nn_exact(f, f, exclude_self=True) / scale
    return MeanStd(float(d.mean()), float(d.std()), d)


def overfitting_score(samples, train, feature_fn=flatten_features, scale=1.0) -> MeanStd:
    """Mean over samples of the (scaled) distance to the nearest training sample."""
    if len(samples) == 0 or len(train) == 0:
        raise ValueError("overfitting score needs non-empty samples and training set")
    d = _nn_exact(feature_fn(samples), feature_fn(train)) / scale
    return MeanStd(float(d.mean()), float(d.std()), d)


def report_json(path, payload):
    def default(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if hasattr(o, "__dataclass_fields__"):
            return asdict(o)
        return float(o)

    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, default=default)
