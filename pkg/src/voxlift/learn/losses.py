"""Loss terms with analytic gradients.

Every loss returns ``(value, grad)`` where ``grad`` has the shape of the
prediction it was computed from.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..errors import DomainError
from ..voxel import FREE, IGNORE, SemanticOccupancy

OPACITY_MIN = 1e-3


@dataclass(frozen=True)
class LossWeights:
    lambda_d: float = 0.05
    lambda_s: float = 0.05
    lambda_n: float = 0.05
    lambda_r: float = 0.005

    def __post_init__(self):
        if min(self.lambda_d, self.lambda_s, self.lambda_n, self.lambda_r) < 0:
            raise DomainError("loss weights must be non-negative")

    def to_json(self) -> dict:
        return asdict(self)


def loss_depth(depth, opacity, target, mask, opacity_min: float = OPACITY_MIN, mask_by_opacity: bool = True):
    """Mean absolute depth error over supervised pixels (optionally only where opacity > ``opacity_min``)."""
    depth = np.asarray(depth, dtype=np.float64)
    sel = np.asarray(mask, dtype=bool)
    if mask_by_opacity:
        sel = sel & (np.asarray(opacity) > opacity_min)
    n = int(sel.sum())
    grad = np.zeros_like(depth)
    if n == 0:
        return 0.0, grad
    diff = depth - np.asarray(target, dtype=np.float64)
    grad[sel] = np.sign(diff[sel]) / n
    return float(np.abs(diff[sel]).sum() / n), grad


def _log_softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def loss_semantic(logits, labels, mask=None):
    """Mean softmax cross-entropy; ``labels`` are channel indices, entries outside ``mask`` are skipped."""
    logits = np.asarray(logits, dtype=np.float64)
    k = logits.shape[-1]
    flat = logits.reshape(-1, k)
    lab = np.asarray(labels).reshape(-1).astype(np.int64)
    sel = np.ones(len(lab), bool) if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
    if np.any((lab[sel] < 0) | (lab[sel] >= k)):
        raise DomainError(f"semantic label outside 0..{k - 1}")
    grad = np.zeros_like(flat)
    n = int(sel.sum())
    if n == 0:
        return 0.0, grad.reshape(logits.shape)
    rows = np.nonzero(sel)[0]
    ls = _log_softmax(flat[rows])
    value = -ls[np.arange(n), lab[rows]].sum() / n
    g = np.exp(ls)
    g[np.arange(n), lab[rows]] -= 1.0
    grad[rows] = g / n
    return float(value), grad.reshape(logits.shape)


def loss_semantic_probs(probs, labels, mask=None, eps: float = 1e-12):
    """Cross-entropy on rendered class probabilities: ``-log(p_y / sum(p))``."""
    probs = np.asarray(probs, dtype=np.float64)
    k = probs.shape[-1]
    flat = probs.reshape(-1, k)
    lab = np.asarray(labels).reshape(-1).astype(np.int64)
    sel = np.ones(len(lab), bool) if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
    if np.any((lab[sel] < 0) | (lab[sel] >= k)):
        raise DomainError(f"semantic label outside 0..{k - 1}")
    grad = np.zeros_like(flat)
    n = int(sel.sum())
    if n == 0:
        return 0.0, grad.reshape(probs.shape)
    rows = np.nonzero(sel)[0]
    p = np.maximum(flat[rows], eps)
    tot = p.sum(axis=1)
    py = p[np.arange(n), lab[rows]]
    value = -(np.log(py) - np.log(tot)).sum() / n
    g = np.broadcast_to((1.0 / tot)[:, None], p.shape).copy()
    g[np.arange(n), lab[rows]] -= 1.0 / py
    grad[rows] = g / n
    return float(value), grad.reshape(probs.shape)


def occupancy_targets(occ: SemanticOccupancy):
    """Channel targets for 3D cross-entropy: classes as-is, FREE -> channel C, IGNORE masked out."""
    lab = occ.labels.astype(np.int64)
    target = np.where(lab == FREE, occ.num_classes, lab)
    return target, lab != IGNORE


def loss_normal(pred, target, mask):
    """Mean over masked pixels of ``|n - n_hat|_1 + |1 - n . n_hat|``."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    sel = np.asarray(mask, dtype=bool)
    grad = np.zeros_like(pred)
    n = int(sel.sum())
    if n == 0:
        return 0.0, grad
    p = pred[sel]
    q = target[sel]
    diff = p - q
    cos = np.sum(p * q, axis=-1)
    value = (np.abs(diff).sum() + np.abs(1.0 - cos).sum()) / n
    grad[sel] = (np.sign(diff) - np.sign(1.0 - cos)[:, None] * q) / n
    return float(value), grad
