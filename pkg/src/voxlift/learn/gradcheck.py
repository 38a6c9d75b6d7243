"""Central finite-difference checks for hand-written gradients."""

from __future__ import annotations

import numpy as np


def rel_err(a, n, floor: float = 1e-6):
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_grad(f, x: np.ndarray, h: float = 1e-3, indices=None) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (modified in place, then restored).

    ``indices`` restricts the probe to a subset of flat positions; the other
    entries of the result are left as NaN.
    """
    flat = x.reshape(-1)
    out = np.full(flat.shape, np.nan)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(x.shape)


def check_grad(f, x: np.ndarray, analytic: np.ndarray, h: float = 1e-3, indices=None, floor: float = 1e-6) -> float:
    """Max relative error between ``analytic`` and central differences of ``f`` over the probed entries."""
    num = numeric_grad(f, x, h, indices)
    sel = ~np.isnan(num)
    if not sel.any():
        return 0.0
    return float(rel_err(np.asarray(analytic)[sel], num[sel], floor).max())
