"""Compare the compiled and numpy render kernels on the demo scene.

    python3 benchmarks/bench_render.py [--rays 8192] [--repeat 3] [--threads 1]

Reports forward and backward time per backend, the speedup, and the max
absolute difference between the backends' outputs.
"""

import argparse
import json
import time

import numpy as np

from voxlift import kernels
from voxlift.geometry import camera_rays
from voxlift.render import SamplerConfig, grid_tuple, sample_rays, stack_fields
from voxlift.scenes import default_scene, rasterize_scene
from voxlift.voxel import VectorField


def setup(n_rays, seed=0):
    sc = default_scene()
    _, density = rasterize_scene(sc)
    rng = np.random.default_rng(seed)
    sem = VectorField(sc.spec, rng.normal(size=tuple(sc.spec.dims) + (sc.num_classes + 1,)))
    nrm = VectorField(sc.spec, rng.normal(size=tuple(sc.spec.dims) + (3,)))
    tau, feat, n_sem = stack_fields(density, sem, nrm)
    o, d = [], []
    for cam in sc.rig.by_id():
        a, b = camera_rays(cam)
        o.append(a)
        d.append(b)
    o = np.concatenate(o)
    d = np.concatenate(d)
    pick = rng.choice(len(o), size=min(n_rays, len(o)), replace=False)
    o, d = o[pick], d[pick]
    s = sample_rays(o, d, sc.spec, SamplerConfig())
    r = len(o)
    grads = (rng.normal(size=r), rng.normal(size=r), rng.normal(size=(r, n_sem)), rng.normal(size=(r, 3)),
             rng.normal(size=r))
    return (tau, feat, grid_tuple(sc.spec), o, d, s.t, s.delta, s.n, s.ms, n_sem), grads


def best_of(fn, repeat):
    best = np.inf
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rays", type=int, default=8192)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    inputs, grads = setup(args.rays)
    results = {"rays": len(inputs[3]), "samples": int(inputs[7].sum()), "threads": args.threads}
    outs = {}
    for b in kernels.available_backends():
        tf, fwd = best_of(lambda: kernels.render_forward(*inputs, threads=args.threads, backend=b), args.repeat)
        tb, bwd = best_of(lambda: kernels.render_backward(*inputs, *grads, threads=args.threads, backend=b), args.repeat)
        results[b] = {"forward_s": tf, "backward_s": tb}
        outs[b] = (fwd, bwd)
    if "compiled" in outs:
        py, cc = outs["python"], outs["compiled"]
        diff = max(float(np.max(np.abs(x - y))) for x, y in zip(py[0] + py[1], cc[0] + cc[1]))
        results["max_abs_diff"] = diff
        results["speedup_forward"] = results["python"]["forward_s"] / results["compiled"]["forward_s"]
        results["speedup_backward"] = results["python"]["backward_s"] / results["compiled"]["backward_s"]
    print(json.dumps(results, indent=2))


if __name__ == "__main__":
    main()
