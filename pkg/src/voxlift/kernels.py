"""Backend selection for the per-ray render kernels.

The compiled extension ``voxlift._kernels`` is used when it has been built;
otherwise the numpy implementation in ``voxlift._fallback`` is used. Set
``VOXLIFT_BACKEND=python`` to force the fallback.

Rays are split into blocks of ``BLOCK_RAYS`` consecutive rays. Each block
accumulates its gradients privately and the block buffers are summed with a
pairwise tree in block order, so gradients are identical for any thread count.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import _fallback

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

BLOCK_RAYS = 2048

if os.environ.get("VOXLIFT_BACKEND", "").lower() == "python" or _compiled is None:
    BACKEND = "python"
else:
    BACKEND = "compiled"


def available_backends() -> list:
    return ["python"] + (["compiled"] if _compiled is not None else [])


def _resolve(backend):
    backend = backend or BACKEND
    if backend == "compiled" and _compiled is None:
        raise RuntimeError("compiled kernels are not built; run `pip install -e . --no-build-isolation`")
    if backend not in ("python", "compiled"):
        raise ValueError(f"unknown backend {backend!r}")
    return backend


def _prep(tau, feat, origins, dirs, t, delta, n, ms):
    f64 = lambda a: np.ascontiguousarray(a, dtype=np.float64)
    i64 = lambda a: np.ascontiguousarray(a, dtype=np.int64)
    feat = f64(feat)
    if feat.ndim == 1:
        feat = feat.reshape(-1, 0)
    return f64(tau), feat, f64(origins), f64(dirs), f64(t), f64(delta), i64(n), i64(ms)


def _blocks(r):
    return [(a, min(a + BLOCK_RAYS, r)) for a in range(0, r, BLOCK_RAYS)] or [(0, 0)]


def _run(fn, jobs, threads):
    if threads <= 1 or len(jobs) == 1:
        return [fn(*j) for j in jobs]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(lambda j: fn(*j), jobs))


def _tree_sum(parts):
    parts = list(parts)
    while len(parts) > 1:
        nxt = [parts[i] + parts[i + 1] for i in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            nxt.append(parts[-1])
        parts = nxt
    return parts[0]


def render_forward(tau, feat, grid, origins, dirs, t, delta, n, ms, n_sem, nearest=False, threads=1, backend=None):
    """Per-ray depth, opacity, semantic sum, extra-channel sum and distortion."""
    backend = _resolve(backend)
    tau, feat, origins, dirs, t, delta, n, ms = _prep(tau, feat, origins, dirs, t, delta, n, ms)
    if backend == "python":
        return _fallback.render_forward(tau, feat, grid, origins, dirs, t, delta, n, ms, n_sem, nearest)
    r = t.shape[0]
    k = feat.shape[1]
    depth = np.zeros(r)
    opacity = np.zeros(r)
    sem = np.zeros((r, n_sem))
    extra = np.zeros((r, k - n_sem))
    dist = np.zeros(r)
    grid = (tuple(map(float, grid[0])), float(grid[1]), tuple(map(int, grid[2])))

    def block(a, b):
        _compiled.forward(
            tau, feat, grid, origins, dirs, t, delta, n, ms, n_sem, nearest, depth, opacity, sem, extra, dist, a, b
        )

    _run(block, _blocks(r), threads)
    return depth, opacity, sem, extra, dist


def render_backward(
    tau, feat, grid, origins, dirs, t, delta, n, ms, n_sem,
    g_depth, g_opacity, g_sem, g_extra, g_dist, nearest=False, threads=1, backend=None,
):
    """Gradients of the linear functional of the forward outputs given by the ``g_*`` weights."""
    backend = _resolve(backend)
    tau, feat, origins, dirs, t, delta, n, ms = _prep(tau, feat, origins, dirs, t, delta, n, ms)
    r = t.shape[0]
    k = feat.shape[1]
    f64 = lambda a, shape: np.ascontiguousarray(np.broadcast_to(np.asarray(a, dtype=np.float64), shape))
    g_depth = f64(g_depth, (r,))
    g_opacity = f64(g_opacity, (r,))
    g_sem = f64(g_sem, (r, n_sem))
    g_extra = f64(g_extra, (r, k - n_sem))
    g_dist = f64(g_dist, (r,))
    if backend == "python":
        return _fallback.render_backward(
            tau, feat, grid, origins, dirs, t, delta, n, ms, n_sem, g_depth, g_opacity, g_sem, g_extra, g_dist, nearest
        )
    grid = (tuple(map(float, grid[0])), float(grid[1]), tuple(map(int, grid[2])))
    nv = tau.shape[0]

    def block(a, b):
        gt = np.zeros(nv)
        gf = np.zeros((nv, k))
        _compiled.backward(
            tau, feat, grid, origins, dirs, t, delta, n, ms, n_sem, nearest,
            g_depth, g_opacity, g_sem, g_extra, g_dist, gt, gf, a, b,
        )
        return gt, gf

    parts = _run(block, _blocks(r), threads)
    return _tree_sum(p[0] for p in parts), _tree_sum(p[1] for p in parts)
