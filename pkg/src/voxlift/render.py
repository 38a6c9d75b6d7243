"""Per-pixel ray sampling and differentiable volume rendering.

Rendering weights follow the usual emission-absorption quadrature::

    T_i = exp(-sum_{j<i} tau_j * delta_j)
    w_i = T_i * (1 - exp(-tau_i * delta_i))

Rays that hit nothing render depth 0 with opacity 0; opacity is always
returned so that losses can mask transparent pixels.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Optional, Union

import numpy as np

from . import kernels
from .errors import DomainError
from .geometry import Camera, Ray, camera_rays
from .voxel import ScalarField, VectorField, VoxelGridSpec

NORMAL_EPS = 1e-8


@dataclass(frozen=True)
class SamplerConfig:
    """Ray sampler settings.

    ``step`` is in meters; ``None`` means half the voxel size. ``last_delta``
    is the interval assigned to the final sample: ``"bin"`` uses the sample's
    own bin width (the step for the fixed strategy), a number is used as-is
    (e.g. ``1e10`` to make the last sample absorb all remaining transmittance).
    """

    strategy: str = "fixed"
    step: Optional[float] = None
    n_samples: int = 64
    alpha: float = 1.0
    t_near: float = 0.0
    t_far: float = 1000.0
    last_delta: Union[str, float] = "bin"
    interpolation: str = "trilinear"
    semantic_mode: str = "logits"
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in ("fixed", "stratified"):
            raise DomainError(f"unknown sampling strategy {self.strategy!r}")
        if self.strategy == "fixed" and self.step is not None and not self.step > 0:
            raise DomainError("step must be positive")
        if self.strategy == "stratified" and self.n_samples < 2:
            raise DomainError("stratified sampling needs at least 2 samples")
        if not (0 < self.alpha <= 1):
            raise DomainError(f"alpha must lie in (0, 1], got {self.alpha}")
        if not (0 <= self.t_near < self.t_far):
            raise DomainError("need 0 <= t_near < t_far")
        if self.interpolation not in ("trilinear", "nearest"):
            raise DomainError(f"unknown interpolation {self.interpolation!r}")
        if self.semantic_mode not in ("logits", "probabilities"):
            raise DomainError(f"unknown semantic mode {self.semantic_mode!r}")
        if self.last_delta != "bin" and not float(self.last_delta) > 0:
            raise DomainError("last_delta must be 'bin' or a positive number")

    def step_for(self, spec: VoxelGridSpec) -> float:
        return 0.5 * spec.voxel_size if self.step is None else float(self.step)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "SamplerConfig":
        return cls(**d)

    def with_step_factor(self, factor: float, spec: VoxelGridSpec) -> "SamplerConfig":
        return replace(self, strategy="fixed", step=factor * spec.voxel_size)


@dataclass
class RaySamples:
    """Padded per-ray samples: ``t``/``delta`` are (R, M); ``n`` live counts; ``ms`` semantic counts."""

    t: np.ndarray
    delta: np.ndarray
    n: np.ndarray
    ms: np.ndarray


@dataclass
class RayOutputs:
    depth: np.ndarray
    opacity: np.ndarray
    sem: np.ndarray
    normal_acc: np.ndarray
    normal: np.ndarray
    no_surface: np.ndarray
    distortion: np.ndarray


@dataclass
class RenderedMaps:
    depth: np.ndarray
    opacity: np.ndarray
    sem_logits: np.ndarray
    normal: np.ndarray
    no_surface: np.ndarray


def ray_aabb(origins: np.ndarray, dirs: np.ndarray, spec: VoxelGridSpec):
    """Slab-test entry/exit distances; ``t_enter > t_exit`` marks a miss."""
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    lo = np.asarray(spec.min_corner)
    hi = np.asarray(spec.max_corner)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (lo - o) * inv
        t1 = (hi - o) * inv
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    # parallel to a slab: inside -> unbounded, outside -> miss
    par = d == 0
    inside = (o >= lo) & (o <= hi)
    tmin = np.where(par, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(par, np.where(inside, np.inf, -np.inf), tmax)
    return tmin.max(axis=1), tmax.min(axis=1)


def semantic_counts(n: np.ndarray, alpha: float) -> np.ndarray:
    """Number of leading samples used for semantics: ``ceil(alpha * n)``."""
    return np.minimum(n, np.ceil(alpha * n - 1e-9).astype(np.int64))


def sample_rays(origins, dirs, spec: VoxelGridSpec, cfg: SamplerConfig, rng: Optional[np.random.Generator] = None,
                t_near=None, t_far=None) -> RaySamples:
    """Sample every ray inside the intersection of ``[t_near, t_far]`` with the grid box."""
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    te, tx = ray_aabb(o, d, spec)
    lo = np.maximum(te, cfg.t_near if t_near is None else t_near)
    hi = np.minimum(tx, cfg.t_far if t_far is None else t_far)
    span = np.where(hi > lo, hi - lo, 0.0)
    r = o.shape[0]
    if cfg.strategy == "fixed":
        step = cfg.step_for(spec)
        n = np.floor(span / step).astype(np.int64)
        m = int(n.max()) if r else 0
        i = np.arange(m)[None, :]
        t = lo[:, None] + (i + 0.5) * step
        delta = np.full((r, m), step)
        last = step if cfg.last_delta == "bin" else float(cfg.last_delta)
    else:
        if rng is None:
            rng = np.random.default_rng(cfg.seed)
        m = cfg.n_samples
        n = np.where(span > 0, m, 0).astype(np.int64)
        width = span / m
        u = rng.uniform(size=(r, m))
        t = lo[:, None] + (np.arange(m)[None, :] + u) * width[:, None]
        delta = np.diff(t, axis=1, append=np.zeros((r, 1)))
        last = width if cfg.last_delta == "bin" else float(cfg.last_delta)
    live = np.arange(m)[None, :] < n[:, None]
    if m:
        rows = np.nonzero(n > 0)[0]
        delta[rows, n[rows] - 1] = last if np.ndim(last) == 0 else last[rows]
    t = np.where(live, t, 0.0)
    delta = np.where(live, delta, 0.0)
    return RaySamples(t, delta, n, semantic_counts(n, cfg.alpha))


def sample_along_ray(ray: Ray, cfg: SamplerConfig, spec: VoxelGridSpec, rng=None):
    """Sample distances and intervals for one ray (empty when it misses the grid)."""
    s = sample_rays(ray.origin, ray.direction, spec, cfg, rng, t_near=ray.t_near, t_far=ray.t_far)
    k = int(s.n[0])
    return s.t[0, :k].copy(), s.delta[0, :k].copy()


# --- single-ray building blocks ---------------------------------------------


def compute_weights(tau, delta):
    """Transmittance and weights for one ray."""
    tau = np.asarray(tau, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(tau < 0):
        raise DomainError("density must be non-negative")
    s = tau * delta
    trans = np.exp(-np.concatenate([[0.0], np.cumsum(s)[:-1]]))
    return trans, trans * -np.expm1(-s)


def weights_jacobian(tau, delta) -> np.ndarray:
    """``J[i, j] = d w_i / d tau_j``."""
    tau = np.asarray(tau, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    trans, w = compute_weights(tau, delta)
    m = len(tau)
    jac = -np.tril(np.ones((m, m)), -1) * w[:, None] * delta[None, :]
    jac[np.diag_indices(m)] = trans * np.exp(-tau * delta) * delta
    return jac


def render_depth(w, t):
    """Expected termination depth and opacity."""
    w = np.asarray(w, dtype=np.float64)
    return float(np.dot(w, t)), float(np.sum(w))


def render_semantics(w, sem, alpha: float = 1.0):
    if not (0 < alpha <= 1):
        raise DomainError(f"alpha must lie in (0, 1], got {alpha}")
    w = np.asarray(w, dtype=np.float64)
    sem = np.asarray(sem, dtype=np.float64)
    ms = int(semantic_counts(np.array([len(w)]), alpha)[0])
    return w[:ms] @ sem[:ms]


def render_normal(w, normals):
    """Weighted normal, renormalized; ``(vector, no_surface)``."""
    acc = np.asarray(w, dtype=np.float64) @ np.asarray(normals, dtype=np.float64)
    norm = np.linalg.norm(acc)
    if norm > NORMAL_EPS:
        return acc / norm, False
    return np.zeros(3), True


def distortion(w, t, delta) -> float:
    """Distortion regularizer via prefix sums (samples sorted by ``t``)."""
    w = np.asarray(w, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    wl = np.cumsum(w) - w
    wml = np.cumsum(w * t) - w * t
    return float(2.0 * np.sum(w * (t * wl - wml)) + np.sum(w * w * np.asarray(delta)) / 3.0)


def distortion_grad(w, t, delta) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    wl = np.cumsum(w) - w
    wml = np.cumsum(w * t) - w * t
    wg = w.sum() - wl - w
    wmg = np.sum(w * t) - wml - w * t
    return 2.0 * (t * wl - wml + wmg - t * wg) + (2.0 / 3.0) * w * np.asarray(delta)


# --- batched rendering ----------------------------------------------------------


def grid_tuple(spec: VoxelGridSpec) -> tuple:
    return (spec.min_corner, spec.voxel_size, spec.dims)


def normalize_normals(acc: np.ndarray):
    norm = np.linalg.norm(acc, axis=-1, keepdims=True)
    ok = norm[..., 0] > NORMAL_EPS
    out = np.where(ok[..., None], acc / np.where(ok[..., None], norm, 1.0), 0.0)
    return out, ~ok


def normalize_backward(acc: np.ndarray, g_out: np.ndarray) -> np.ndarray:
    """Gradient through ``acc / |acc|`` (zero where the no-surface flag is set)."""
    norm = np.linalg.norm(acc, axis=-1, keepdims=True)
    ok = norm > NORMAL_EPS
    safe = np.where(ok, norm, 1.0)
    n = acc / safe
    g = (g_out - n * np.sum(n * g_out, axis=-1, keepdims=True)) / safe
    return np.where(ok, g, 0.0)


def stack_fields(density: ScalarField, sem: Optional[VectorField], normals: Optional[VectorField]):
    """Flatten fields into the kernel layout: ``tau`` (Nv,), ``feat`` (Nv, n_sem [+3]), ``n_sem``."""
    spec = density.spec
    parts = []
    n_sem = 0
    for f in (sem, normals):
        if f is not None and f.spec != spec:
            raise DomainError("all fields must share one grid spec")
    if sem is not None:
        parts.append(sem.values.reshape(spec.n_voxels, -1))
        n_sem = sem.channels
    if normals is not None:
        if normals.channels != 3:
            raise DomainError("normal field needs 3 channels")
        parts.append(normals.values.reshape(spec.n_voxels, 3))
    feat = np.concatenate(parts, axis=1) if parts else np.zeros((spec.n_voxels, 0))
    return density.values.reshape(-1), feat, n_sem


def softmax(x: np.ndarray, axis=-1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def render_rays(tau, feat, n_sem, spec, origins, dirs, samples: RaySamples, cfg: SamplerConfig,
                threads: int = 1, backend=None) -> RayOutputs:
    nearest = cfg.interpolation == "nearest"
    depth, opacity, sem, extra, dist = kernels.render_forward(
        tau, feat, grid_tuple(spec), origins, dirs, samples.t, samples.delta, samples.n, samples.ms,
        n_sem, nearest, threads=threads, backend=backend,
    )
    normal, flag = normalize_normals(extra) if extra.shape[1] == 3 else (extra, np.ones(len(depth), bool))
    return RayOutputs(depth, opacity, sem, extra, normal, flag, dist)


def render_view(camera: Camera, density: ScalarField, sem: Optional[VectorField] = None,
                normals: Optional[VectorField] = None, cfg: SamplerConfig = SamplerConfig(),
                resolution: Optional[tuple] = None, threads: int = 1, backend=None) -> RenderedMaps:
    """Render one ray per output pixel. ``resolution`` is ``(width, height)``."""
    spec = density.spec
    if sem is not None and cfg.semantic_mode == "probabilities":
        sem = VectorField(sem.spec, softmax(sem.values, axis=3))
    tau, feat, n_sem = stack_fields(density, sem, normals)
    cam = camera if resolution is None else camera.with_resolution(*resolution)
    o, d = camera_rays(cam)
    rng = np.random.default_rng(cfg.seed)
    samples = sample_rays(o, d, spec, cfg, rng)
    out = render_rays(tau, feat, n_sem, spec, o, d, samples, cfg, threads, backend)
    h, w = cam.height, cam.width
    normal = out.normal if normals is not None else np.zeros((h * w, 3))
    return RenderedMaps(
        depth=out.depth.reshape(h, w),
        opacity=out.opacity.reshape(h, w),
        sem_logits=out.sem.reshape(h, w, n_sem),
        normal=normal.reshape(h, w, 3),
        no_surface=(out.no_surface if normals is not None else np.ones(h * w, bool)).reshape(h, w),
    )

