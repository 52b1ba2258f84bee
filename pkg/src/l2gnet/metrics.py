"""Segmentation evaluation: Dice coefficient and percentile Hausdorff distance.

Conventions: Dice of two empty masks is 1; Hausdorff is undefined (None) when
either mask is empty and undefined values are excluded from means. Boundaries
are class pixels with at least one 4-neighbor outside the class.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class MetricReport:
    per_class_dsc: dict = field(default_factory=dict)
    per_class_hd: dict = field(default_factory=dict)   # None = undefined
    mean_dsc: float = float("nan")
    mean_hd: float = float("nan")
    hd_undefined_count: int = 0


def dice(pred, gt, c):
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    p = pred == c
    g = gt == c
    denom = p.sum() + g.sum()
    if denom == 0:
        return 1.0
    return 2.0 * np.logical_and(p, g).sum() / denom


def boundary_pixels(mask):
    """Coordinates of mask pixels with a 4-neighbor outside the mask."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return np.zeros((0, 2))
    padded = np.pad(mask, 1, constant_values=False)
    inner = (padded[:-2, 1:-1] & padded[2:, 1:-1] &
             padded[1:-1, :-2] & padded[1:-1, 2:])
    return np.argwhere(mask & ~inner).astype(np.float64)


def hausdorff(pred, gt, c, percentile=95):
    """Symmetric percentile Hausdorff distance between class-c boundaries,
    Euclidean pixel metric; None when either mask is empty."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    pa = boundary_pixels(pred == c)
    ga = boundary_pixels(gt == c)
    if len(pa) == 0 or len(ga) == 0:
        return None
    d = np.sqrt(((pa[:, None, :] - ga[None, :, :]) ** 2).sum(axis=2))
    fwd = d.min(axis=1)   # pred boundary -> gt
    bwd = d.min(axis=0)   # gt boundary -> pred
    if percentile >= 100:
        return float(max(fwd.max(), bwd.max()))
    return float(max(np.percentile(fwd, percentile),
                     np.percentile(bwd, percentile)))


def evaluate_sample(pred, gt, classes, percentile=95):
    rep = MetricReport()
    for c in range(1, classes):
        rep.per_class_dsc[c] = dice(pred, gt, c)
        rep.per_class_hd[c] = hausdorff(pred, gt, c, percentile)
    _finalize(rep)
    return rep


def evaluate_dataset(model, ds, percentile=95):
    """Mean foreground DSC/HD of a model over a dataset."""
    rep = MetricReport()
    sums_d = {c: [] for c in range(1, ds.classes)}
    sums_h = {c: [] for c in range(1, ds.classes)}
    undefined = 0
    from .autodiff import no_grad
    for s in ds.samples:
        with no_grad():
            pred = model.predict(s.image.astype(np.float64))
        for c in range(1, ds.classes):
            sums_d[c].append(dice(pred, s.labels, c))
            h = hausdorff(pred, s.labels, c, percentile)
            if h is None:
                undefined += 1
            else:
                sums_h[c].append(h)
    for c in range(1, ds.classes):
        rep.per_class_dsc[c] = float(np.mean(sums_d[c]))
        rep.per_class_hd[c] = float(np.mean(sums_h[c])) if sums_h[c] else None
    rep.hd_undefined_count = undefined
    _finalize(rep)
    return rep


def _finalize(rep):
    rep.mean_dsc = float(np.mean(list(rep.per_class_dsc.values())))
    defined = [v for v in rep.per_class_hd.values() if v is not None]
    rep.mean_hd = float(np.mean(defined)) if defined else float("nan")
