"""Pure-numpy render kernels (reference backend).

Inputs use a padded per-ray layout: ``t`` and ``delta`` are (R, M) arrays and
``n[r]`` is the number of live samples on ray ``r``. The field is a flat
density array ``tau`` (Nv,) and a flat feature array ``feat`` (Nv, K) whose
first ``n_sem`` channels are rendered over the first ``ms[r]`` samples only
and whose remaining channels use every sample.
"""

from __future__ import annotations

import numpy as np

from .voxel import CORNER_OFFSETS


def _taps(grid, pos, nearest):
    """Flat indices (N, T) and weights (N, T), T = 1 (nearest) or 8 (trilinear)."""
    mn, vs, dims = grid
    dims = np.asarray(dims)
    rel = (pos - np.asarray(mn)) / vs
    hi = dims * 1.0
    inside = np.all((rel >= 0) & (rel <= hi), axis=-1)
    if nearest:
        cell = np.floor(rel).astype(np.int64)
        ok = np.all((cell >= 0) & (cell < dims), axis=-1)
        flat = (cell[:, 0] * dims[1] + cell[:, 1]) * dims[2] + cell[:, 2]
        return np.where(ok, flat, 0)[:, None], ok[:, None].astype(np.float64)
    g = rel - 0.5
    i0 = np.floor(g).astype(np.int64)
    f = g - i0
    corner = i0[:, None, :] + CORNER_OFFSETS[None]
    frac = np.where(CORNER_OFFSETS[None] == 1, f[:, None, :], 1.0 - f[:, None, :])
    w = frac[..., 0] * frac[..., 1] * frac[..., 2]
    ok = np.all((corner >= 0) & (corner < dims), axis=-1) & inside[:, None]
    flat = (corner[..., 0] * dims[1] + corner[..., 1]) * dims[2] + corner[..., 2]
    return np.where(ok, flat, 0), np.where(ok, w, 0.0)


def _gather(tau, feat, grid, origins, dirs, t, live, nearest):
    r, m = t.shape
    pos = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    idx, tw = _taps(grid, pos.reshape(-1, 3), nearest)
    tau_s = np.sum(tw * tau[idx], axis=1).reshape(r, m)
    tau_s = np.where(live, tau_s, 0.0)
    k = feat.shape[1]
    if k:
        feat_s = np.einsum("nt,ntk->nk", tw, feat[idx]).reshape(r, m, k)
    else:
        feat_s = np.zeros((r, m, 0))
    return idx, tw, tau_s, feat_s


def _weights(tau_s, delta, live):
    s = np.where(live, tau_s * np.where(live, delta, 0.0), 0.0)
    excl = np.zeros_like(s)
    np.cumsum(s[:, :-1], axis=1, out=excl[:, 1:])
    trans = np.exp(-excl)
    alpha = -np.expm1(-s)
    return s, trans, trans * alpha


def _dist_parts(w, mid, delta, live):
    wm = w * mid
    w_lt = np.cumsum(w, axis=1) - w
    wm_lt = np.cumsum(wm, axis=1) - wm
    w_gt = np.sum(w, axis=1, keepdims=True) - w_lt - w
    wm_gt = np.sum(wm, axis=1, keepdims=True) - wm_lt - wm
    cross = mid * w_lt - wm_lt + wm_gt - mid * w_gt
    d = np.where(live, delta, 0.0)
    dist = np.sum(w * (mid * w_lt - wm_lt), axis=1) * 2.0 + np.sum(w * w * d, axis=1) / 3.0
    dgrad = 2.0 * cross + (2.0 / 3.0) * w * d
    return dist, dgrad


def render_forward(tau, feat, grid, origins, dirs, t, delta, n, ms, n_sem, nearest=False, threads=1):
    r, m = t.shape
    cols = np.arange(m)[None, :]
    live = cols < n[:, None]
    sem_live = cols < ms[:, None]
    _, _, tau_s, feat_s = _gather(tau, feat, grid, origins, dirs, t, live, nearest)
    _, _, w = _weights(tau_s, delta, live)
    tt = np.where(live, t, 0.0)
    depth = np.sum(w * tt, axis=1)
    opacity = np.sum(w, axis=1)
    ws = np.where(sem_live, w, 0.0)
    sem = np.einsum("rm,rmk->rk", ws, feat_s[..., :n_sem])
    extra = np.einsum("rm,rmk->rk", w, feat_s[..., n_sem:])
    dist, _ = _dist_parts(w, tt, delta, live)
    return depth, opacity, sem, extra, dist


def render_backward(
    tau, feat, grid, origins, dirs, t, delta, n, ms, n_sem, g_depth, g_opacity, g_sem, g_extra, g_dist,
    nearest=False, threads=1,
):
    """Gradients of ``sum(g_depth*depth + g_opacity*opacity + g_sem.sem + g_extra.extra + g_dist*dist)``."""
    r, m = t.shape
    nv, k = feat.shape
    cols = np.arange(m)[None, :]
    live = cols < n[:, None]
    sem_live = cols < ms[:, None]
    idx, tw, tau_s, feat_s = _gather(tau, feat, grid, origins, dirs, t, live, nearest)
    s, trans, w = _weights(tau_s, delta, live)
    tt = np.where(live, t, 0.0)
    _, dgrad = _dist_parts(w, tt, delta, live)

    gw = g_depth[:, None] * tt + g_opacity[:, None] + g_dist[:, None] * dgrad
    if n_sem:
        gw = gw + np.where(sem_live, np.einsum("rk,rmk->rm", g_sem, feat_s[..., :n_sem]), 0.0)
    if k > n_sem:
        gw = gw + np.einsum("rk,rmk->rm", g_extra, feat_s[..., n_sem:])
    gw = np.where(live, gw, 0.0)

    gww = gw * w
    suffix = np.cumsum(gww[:, ::-1], axis=1)[:, ::-1] - gww
    trans_next = trans * np.exp(-s)
    gs = trans_next * gw - suffix
    g_tau_s = np.where(live, gs * np.where(live, delta, 0.0), 0.0).reshape(-1)

    flat_idx = idx.ravel()
    grad_tau = np.bincount(flat_idx, weights=(tw * g_tau_s[:, None]).ravel(), minlength=nv)
    grad_feat = np.zeros((nv, k))
    if k:
        gf = np.zeros((r, m, k))
        if n_sem:
            gf[..., :n_sem] = np.where(sem_live, w, 0.0)[..., None] * g_sem[:, None, :]
        if k > n_sem:
            gf[..., n_sem:] = w[..., None] * g_extra[:, None, :]
        gf = gf.reshape(-1, k)
        for c in range(k):
            grad_feat[:, c] = np.bincount(flat_idx, weights=(tw * gf[:, c : c + 1]).ravel(), minlength=nv)
    return grad_tau, grad_feat
