# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled per-ray render kernels.

Same contract as ``voxlift._fallback``; each call processes rays ``[r0, r1)``
and accumulates gradients into caller-owned buffers, so callers can split the
ray range into blocks with private buffers and reduce them in a fixed order.
"""

from libc.math cimport exp, expm1, floor
from libc.stdlib cimport malloc, free

import numpy as np


cdef inline int _taps(double px, double py, double pz, double mx, double my, double mz, double vs,
                      long h, long w, long z, bint nearest, long* idx, double* tw) noexcept nogil:
    cdef double rx = (px - mx) / vs
    cdef double ry = (py - my) / vs
    cdef double rz = (pz - mz) / vs
    cdef long ci, cj, ck, i0, j0, k0, c, ii, jj, kk
    cdef double fx, fy, fz, gx, gy, gz, wx, wy, wz
    if nearest:
        ci = <long>floor(rx)
        cj = <long>floor(ry)
        ck = <long>floor(rz)
        if ci < 0 or ci >= h or cj < 0 or cj >= w or ck < 0 or ck >= z:
            idx[0] = 0
            tw[0] = 0.0
        else:
            idx[0] = (ci * w + cj) * z + ck
            tw[0] = 1.0
        return 1
    if rx < 0 or rx > h or ry < 0 or ry > w or rz < 0 or rz > z:
        for c in range(8):
            idx[c] = 0
            tw[c] = 0.0
        return 8
    gx = rx - 0.5
    gy = ry - 0.5
    gz = rz - 0.5
    i0 = <long>floor(gx)
    j0 = <long>floor(gy)
    k0 = <long>floor(gz)
    fx = gx - i0
    fy = gy - j0
    fz = gz - k0
    for c in range(8):
        ii = i0 + ((c >> 2) & 1)
        jj = j0 + ((c >> 1) & 1)
        kk = k0 + (c & 1)
        wx = fx if (c >> 2) & 1 else 1.0 - fx
        wy = fy if (c >> 1) & 1 else 1.0 - fy
        wz = fz if c & 1 else 1.0 - fz
        if ii < 0 or ii >= h or jj < 0 or jj >= w or kk < 0 or kk >= z:
            idx[c] = 0
            tw[c] = 0.0
        else:
            idx[c] = (ii * w + jj) * z + kk
            tw[c] = wx * wy * wz
    return 8


def forward(const double[::1] tau, const double[:, ::1] feat, tuple grid,
            const double[:, ::1] origins, const double[:, ::1] dirs,
            const double[:, ::1] t, const double[:, ::1] delta,
            const long[::1] n, const long[::1] ms, int n_sem, bint nearest,
            double[::1] depth, double[::1] opacity, double[:, ::1] sem, double[:, ::1] extra,
            double[::1] dist, long r0, long r1):
    cdef double mx = grid[0][0], my = grid[0][1], mz = grid[0][2]
    cdef double vs = grid[1]
    cdef long h = grid[2][0], w = grid[2][1], z = grid[2][2]
    cdef long k = feat.shape[1]
    cdef long r, i, c, ch, nt
    cdef long idx[8]
    cdef double tw[8]
    cdef double px, py, pz, ts, s, a, wi, trans, wsum, wmsum, d, dd, op, dv
    with nogil:
        for r in range(r0, r1):
            trans = 1.0
            wsum = 0.0
            wmsum = 0.0
            d = 0.0
            op = 0.0
            dv = 0.0
            for ch in range(n_sem):
                sem[r, ch] = 0.0
            for ch in range(k - n_sem):
                extra[r, ch] = 0.0
            for i in range(n[r]):
                px = origins[r, 0] + t[r, i] * dirs[r, 0]
                py = origins[r, 1] + t[r, i] * dirs[r, 1]
                pz = origins[r, 2] + t[r, i] * dirs[r, 2]
                nt = _taps(px, py, pz, mx, my, mz, vs, h, w, z, nearest, idx, tw)
                ts = 0.0
                for c in range(nt):
                    ts = ts + tw[c] * tau[idx[c]]
                s = ts * delta[r, i]
                a = -expm1(-s)
                wi = trans * a
                d = d + wi * t[r, i]
                op = op + wi
                dd = t[r, i] * wsum - wmsum
                dv = dv + 2.0 * wi * dd + wi * wi * delta[r, i] / 3.0
                wsum = wsum + wi
                wmsum = wmsum + wi * t[r, i]
                if wi != 0.0:
                    for ch in range(k):
                        if ch < n_sem and i >= ms[r]:
                            continue
                        ts = 0.0
                        for c in range(nt):
                            ts = ts + tw[c] * feat[idx[c], ch]
                        if ch < n_sem:
                            sem[r, ch] = sem[r, ch] + wi * ts
                        else:
                            extra[r, ch - n_sem] = extra[r, ch - n_sem] + wi * ts
                trans = trans * exp(-s)
            depth[r] = d
            opacity[r] = op
            dist[r] = dv


def backward(const double[::1] tau, const double[:, ::1] feat, tuple grid,
             const double[:, ::1] origins, const double[:, ::1] dirs,
             const double[:, ::1] t, const double[:, ::1] delta,
             const long[::1] n, const long[::1] ms, int n_sem, bint nearest,
             const double[::1] g_depth, const double[::1] g_opacity, const double[:, ::1] g_sem,
             const double[:, ::1] g_extra, const double[::1] g_dist,
             double[::1] grad_tau, double[:, ::1] grad_feat, long r0, long r1):
    cdef double mx = grid[0][0], my = grid[0][1], mz = grid[0][2]
    cdef double vs = grid[1]
    cdef long h = grid[2][0], w = grid[2][1], z = grid[2][2]
    cdef long k = feat.shape[1]
    cdef long mmax = t.shape[1]
    cdef long r, i, c, ch, nt, ni
    cdef double px, py, pz, ts, s, wi, trans, wtot, wmtot, wlt, wmlt, wgt, wmgt, gw, suffix, gs, gf
    cdef long* idx = <long*>malloc(mmax * 8 * sizeof(long))
    cdef double* tw = <double*>malloc(mmax * 8 * sizeof(double))
    cdef double* ws = <double*>malloc(mmax * sizeof(double))
    cdef double* tn = <double*>malloc(mmax * sizeof(double))
    cdef double* gws = <double*>malloc(mmax * sizeof(double))
    if idx == NULL or tw == NULL or ws == NULL or tn == NULL or gws == NULL:
        free(idx); free(tw); free(ws); free(tn); free(gws)
        raise MemoryError()
    try:
        with nogil:
            for r in range(r0, r1):
                ni = n[r]
                trans = 1.0
                wtot = 0.0
                wmtot = 0.0
                # pass 1: weights and taps
                for i in range(ni):
                    px = origins[r, 0] + t[r, i] * dirs[r, 0]
                    py = origins[r, 1] + t[r, i] * dirs[r, 1]
                    pz = origins[r, 2] + t[r, i] * dirs[r, 2]
                    nt = _taps(px, py, pz, mx, my, mz, vs, h, w, z, nearest, idx + 8 * i, tw + 8 * i)
                    ts = 0.0
                    for c in range(nt):
                        ts = ts + tw[8 * i + c] * tau[idx[8 * i + c]]
                    s = ts * delta[r, i]
                    ws[i] = trans * (-expm1(-s))
                    trans = trans * exp(-s)
                    tn[i] = trans
                    wtot = wtot + ws[i]
                    wmtot = wmtot + ws[i] * t[r, i]
                # pass 2: d(loss)/d(w_i) and feature gradients
                wlt = 0.0
                wmlt = 0.0
                for i in range(ni):
                    wi = ws[i]
                    wgt = wtot - wlt - wi
                    wmgt = wmtot - wmlt - wi * t[r, i]
                    gw = g_depth[r] * t[r, i] + g_opacity[r]
                    gw = gw + g_dist[r] * (2.0 * (t[r, i] * wlt - wmlt + wmgt - t[r, i] * wgt)
                                           + (2.0 / 3.0) * wi * delta[r, i])
                    for ch in range(k):
                        if ch < n_sem:
                            if i >= ms[r]:
                                continue
                            gf = g_sem[r, ch]
                        else:
                            gf = g_extra[r, ch - n_sem]
                        ts = 0.0
                        for c in range(nt):
                            ts = ts + tw[8 * i + c] * feat[idx[8 * i + c], ch]
                            grad_feat[idx[8 * i + c], ch] += tw[8 * i + c] * wi * gf
                        gw = gw + gf * ts
                    gws[i] = gw
                    wlt = wlt + wi
                    wmlt = wmlt + wi * t[r, i]
                # pass 3: through transmittance, back to density
                suffix = 0.0
                for i in range(ni - 1, -1, -1):
                    gs = tn[i] * gws[i] - suffix
                    suffix = suffix + gws[i] * ws[i]
                    gs = gs * delta[r, i]
                    for c in range(nt):
                        grad_tau[idx[8 * i + c]] += tw[8 * i + c] * gs
    finally:
        free(idx)
        free(tw)
        free(ws)
        free(tn)
        free(gws)
