"""Occupancy metrics: per-class IoU / mIoU and geometry precision, recall, F-score."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import DomainError
from .voxel import IGNORE, SemanticOccupancy


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    @property
    def num_classes(self) -> int:
        return len(self.tp)


@dataclass(frozen=True)
class EvalConfig:
    """``delta`` is the match distance in meters (``None`` = voxel size).

    IGNORE voxels in the ground truth are dropped from both confusion counts
    and point sets.
    """

    delta: Optional[float] = None
    ignore: str = "exclude"

    def __post_init__(self):
        if self.delta is not None and not self.delta > 0:
            raise DomainError("delta must be positive")
        if self.ignore != "exclude":
            raise DomainError("only the 'exclude' ignore policy is supported")

    def to_json(self) -> dict:
        return asdict(self)


def _check_pair(pred: SemanticOccupancy, gt: SemanticOccupancy):
    if pred.spec != gt.spec:
        raise DomainError("prediction and ground truth grids differ")


def _region(gt: SemanticOccupancy, mask):
    keep = gt.labels != IGNORE
    if mask is not None:
        keep = keep & np.asarray(mask, dtype=bool)
    return keep


def confusion(pred: SemanticOccupancy, gt: SemanticOccupancy, mask=None) -> ConfusionCounts:
    """Per-class TP/FP/FN; FREE only counts as "not class i". ``mask`` restricts the evaluated voxels."""
    _check_pair(pred, gt)
    keep = _region(gt, mask)
    p = pred.labels[keep].astype(np.int64)
    g = gt.labels[keep].astype(np.int64)
    c = gt.num_classes
    tp = np.zeros(c, dtype=np.int64)
    fp = np.zeros(c, dtype=np.int64)
    fn = np.zeros(c, dtype=np.int64)
    for i in range(c):
        pi = p == i
        gi = g == i
        tp[i] = np.count_nonzero(pi & gi)
        fp[i] = np.count_nonzero(pi & ~gi)
        fn[i] = np.count_nonzero(gi & ~pi)
    return ConfusionCounts(tp, fp, fn)


def miou(counts: ConfusionCounts):
    """Mean IoU over classes with TP+FP+FN > 0. Returns ``(miou, per_class)``; absent classes are NaN."""
    denom = counts.tp + counts.fp + counts.fn
    per = np.full(counts.num_classes, np.nan)
    present = denom > 0
    per[present] = counts.tp[present] / denom[present]
    value = float(per[present].mean()) if present.any() else float("nan")
    return value, per


def geometry_iou(pred: SemanticOccupancy, gt: SemanticOccupancy, mask=None) -> float:
    """IoU of the occupied sets (classes ignored)."""
    _check_pair(pred, gt)
    keep = _region(gt, mask)
    po = pred.occupied[keep]
    go = gt.occupied[keep]
    union = np.count_nonzero(po | go)
    return float(np.count_nonzero(po & go) / union) if union else float("nan")


def _occupied_indices(occ: SemanticOccupancy, keep) -> np.ndarray:
    return np.argwhere(occ.occupied & keep)


def precision_recall_fscore(pred: SemanticOccupancy, gt: SemanticOccupancy, cfg: EvalConfig = EvalConfig(), mask=None):
    """Point-set precision/recall with a strict ``< delta`` match, and their harmonic mean.

    Both sets are voxel centers of the same grid, so distances are computed in
    index units and scaled by the voxel size; a grid-aligned shift of exactly
    ``delta`` therefore fails the strict test without rounding noise.
    """
    _check_pair(pred, gt)
    keep = _region(gt, mask)
    delta = pred.spec.voxel_size if cfg.delta is None else cfg.delta
    a = _occupied_indices(pred, keep)
    b = _occupied_indices(gt, keep)
    if len(a) == 0 or len(b) == 0:
        warnings.warn("empty occupied set: " + ("prediction" if len(a) == 0 else "ground truth"), RuntimeWarning)
        return 0.0, 0.0, 0.0
    vs = pred.spec.voxel_size
    da, _ = cKDTree(b).query(a, k=1)
    db, _ = cKDTree(a).query(b, k=1)
    p = float(np.count_nonzero(da * vs < delta) / len(a))
    r = float(np.count_nonzero(db * vs < delta) / len(b))
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def brute_force_pr(a_pts: np.ndarray, b_pts: np.ndarray, delta: float):
    """O(n*m) reference for precision/recall between two point sets."""
    a_pts = np.asarray(a_pts, dtype=np.float64)
    b_pts = np.asarray(b_pts, dtype=np.float64)
    d = np.sqrt(((a_pts[:, None, :] - b_pts[None, :, :]) ** 2).sum(-1))
    p = float(np.mean(d.min(axis=1) < delta))
    r = float(np.mean(d.min(axis=0) < delta))
    return p, r


def evaluate(pred: SemanticOccupancy, gt: SemanticOccupancy, cfg: EvalConfig = EvalConfig(), mask=None) -> dict:
    """JSON-ready report: mIoU, per-class IoU (None for absent classes), P/R/F, delta, geometry IoU."""
    m, per = miou(confusion(pred, gt, mask))
    p, r, f = precision_recall_fscore(pred, gt, cfg, mask)
    fin = lambda x: None if not np.isfinite(x) else float(x)
    return {
        "miou": fin(m),
        "per_class_iou": [fin(x) for x in per],
        "precision": p,
        "recall": r,
        "fscore": f,
        "delta": pred.spec.voxel_size if cfg.delta is None else cfg.delta,
        "geometry_iou": fin(geometry_iou(pred, gt, mask)),
    }
