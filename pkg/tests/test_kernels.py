"""Compiled vs numpy kernel parity and thread-count determinism."""

import numpy as np
import pytest

from voxlift import kernels
from voxlift.geometry import camera_rays
from voxlift.render import SamplerConfig, grid_tuple, sample_rays, stack_fields
from voxlift.scenes import default_scene, rasterize_scene
from voxlift.voxel import VectorField

needs_compiled = pytest.mark.skipif("compiled" not in kernels.available_backends(), reason="extension not built")


@pytest.fixture(scope="module")
def problem():
    sc = default_scene(dims=(16, 16, 16), voxel_size=0.5, width=48)
    _, density = rasterize_scene(sc)
    rng = np.random.default_rng(7)
    density.values[:] = density.values * rng.uniform(0.01, 0.2, density.values.shape) + rng.uniform(0, 0.5, sc.spec.dims)
    sem = VectorField(sc.spec, rng.normal(size=sc.spec.dims + (5,)))
    nrm = VectorField(sc.spec, rng.normal(size=sc.spec.dims + (3,)))
    tau, feat, n_sem = stack_fields(density, sem, nrm)
    o = np.concatenate([camera_rays(c)[0] for c in sc.rig.by_id()])
    d = np.concatenate([camera_rays(c)[1] for c in sc.rig.by_id()])
    s = sample_rays(o, d, sc.spec, SamplerConfig(alpha=0.6))
    r = len(o)
    g = (rng.normal(size=r), rng.normal(size=r), rng.normal(size=(r, n_sem)), rng.normal(size=(r, 3)), rng.normal(size=r))
    return (tau, feat, grid_tuple(sc.spec), o, d, s.t, s.delta, s.n, s.ms, n_sem), g


def test_backend_selection():
    assert kernels.BACKEND in kernels.available_backends()
    with pytest.raises(ValueError):
        kernels.render_forward(*[None] * 10, backend="gpu")


@needs_compiled
@pytest.mark.parametrize("nearest", [False, True])
def test_compiled_matches_python(problem, nearest):
    args, g = problem
    fp = kernels.render_forward(*args, nearest=nearest, backend="python")
    fc = kernels.render_forward(*args, nearest=nearest, backend="compiled")
    for a, b in zip(fp, fc):
        np.testing.assert_allclose(b, a, rtol=1e-10, atol=1e-12)
    bp = kernels.render_backward(*args, *g, nearest=nearest, backend="python")
    bc = kernels.render_backward(*args, *g, nearest=nearest, backend="compiled")
    for a, b in zip(bp, bc):
        np.testing.assert_allclose(b, a, rtol=1e-9, atol=1e-10)


@pytest.mark.parametrize("backend", kernels.available_backends())
def test_thread_count_is_bit_identical(problem, backend):
    args, g = problem
    assert len(args[3]) > kernels.BLOCK_RAYS  # several blocks
    f1 = kernels.render_forward(*args, threads=1, backend=backend)
    f4 = kernels.render_forward(*args, threads=4, backend=backend)
    for a, b in zip(f1, f4):
        np.testing.assert_array_equal(a, b)
    b1 = kernels.render_backward(*args, *g, threads=1, backend=backend)
    b3 = kernels.render_backward(*args, *g, threads=3, backend=backend)
    for a, b in zip(b1, b3):
        np.testing.assert_array_equal(a, b)


def test_empty_ray_batch(problem):
    args, _ = problem
    empty = list(args)
    empty[3] = np.zeros((0, 3))
    empty[4] = np.zeros((0, 3))
    empty[5] = np.zeros((0, 4))
    empty[6] = np.zeros((0, 4))
    empty[7] = np.zeros(0, np.int64)
    empty[8] = np.zeros(0, np.int64)
    for b in kernels.available_backends():
        out = kernels.render_forward(*empty, backend=b)
        assert out[0].shape == (0,)
