"""Synthetic primitive scenes with analytic ground truth.

The scene is the union of its primitives intersected with the grid box, so
every surface seen by a camera lies inside the voxel volume. Primitives later
in the list override earlier ones when voxelizing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DomainError
from .geometry import Camera, CameraRig, camera_rays, project_points, rig_from_json, rig_to_json, ring_rig
from .render import ray_aabb
from .voxel import FREE, ScalarField, SemanticOccupancy, VoxelGridSpec, voxel_centers

TAU_OCC = 50.0


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    class_id: int
    kind: str = "sphere"

    def __post_init__(self):
        if not self.radius > 0:
            raise DomainError("sphere radius must be positive")

    def contains(self, p):
        return np.sum((p - np.asarray(self.center)) ** 2, axis=-1) <= self.radius**2

    def interval(self, o, d):
        """Entry/exit distances and entry normals for unit-direction rays."""
        oc = o - np.asarray(self.center)
        b = np.sum(oc * d, axis=1)
        c = np.sum(oc * oc, axis=1) - self.radius**2
        disc = b * b - c
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t0 = np.where(hit, -b - sq, np.inf)
        t1 = np.where(hit, -b + sq, -np.inf)
        n = (o + np.where(hit, t0, 0.0)[:, None] * d - np.asarray(self.center)) / self.radius
        return t0, t1, np.where(hit[:, None], n, 0.0)

    def to_json(self):
        return {"kind": "sphere", "center": list(self.center), "radius": self.radius, "class_id": self.class_id}


@dataclass(frozen=True)
class Box:
    """Axis-aligned box given by center and full edge lengths."""

    center: tuple
    size: tuple
    class_id: int
    kind: str = "box"

    def __post_init__(self):
        if min(self.size) <= 0:
            raise DomainError("box sizes must be positive")

    @property
    def lo(self):
        return np.asarray(self.center) - 0.5 * np.asarray(self.size)

    @property
    def hi(self):
        return np.asarray(self.center) + 0.5 * np.asarray(self.size)

    def contains(self, p):
        return np.all((p >= self.lo) & (p <= self.hi), axis=-1)

    def interval(self, o, d):
        return _slab_interval(o, d, self.lo, self.hi)

    def to_json(self):
        return {"kind": "box", "center": list(self.center), "size": list(self.size), "class_id": self.class_id}


@dataclass(frozen=True)
class GroundPlane:
    """Half-space ``z <= height``."""

    height: float
    class_id: int
    kind: str = "ground"

    def contains(self, p):
        return p[..., 2] <= self.height

    def interval(self, o, d):
        dz = d[:, 2]
        above = o[:, 2] > self.height
        with np.errstate(divide="ignore", invalid="ignore"):
            th = (self.height - o[:, 2]) / dz
        down = dz < 0
        t0 = np.where(above, np.where(down, th, np.inf), -np.inf)
        t1 = np.where(above, np.where(down, np.inf, -np.inf), np.where(dz > 0, th, np.inf))
        n = np.broadcast_to(np.array([0.0, 0.0, 1.0]), o.shape)
        return t0, t1, n.copy()

    def to_json(self):
        return {"kind": "ground", "height": self.height, "class_id": self.class_id}


def _slab_interval(o, d, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        ta = (lo - o) * inv
        tb = (hi - o) * inv
    par = d == 0
    inside = (o >= lo) & (o <= hi)
    tmin = np.where(par, np.where(inside, -np.inf, np.inf), np.minimum(ta, tb))
    tmax = np.where(par, np.where(inside, np.inf, -np.inf), np.maximum(ta, tb))
    axis = np.argmax(tmin, axis=1)
    t0 = tmin.max(axis=1)
    t1 = tmax.min(axis=1)
    n = np.zeros_like(o)
    rows = np.arange(len(o))
    n[rows, axis] = -np.sign(d[rows, axis])
    return t0, t1, n


def primitive_from_json(d: dict):
    kind = d["kind"]
    if kind == "sphere":
        return Sphere(tuple(d["center"]), float(d["radius"]), int(d["class_id"]))
    if kind == "box":
        return Box(tuple(d["center"]), tuple(d["size"]), int(d["class_id"]))
    if kind in ("ground", "ground-plane"):
        return GroundPlane(float(d["height"]), int(d["class_id"]))
    raise DomainError(f"unknown primitive kind {kind!r}")


@dataclass
class SceneConfig:
    primitives: list
    rig: CameraRig
    spec: VoxelGridSpec
    num_classes: int
    seed: int = 0
    tau_occ: float = TAU_OCC
    class_names: list = field(default_factory=list)

    def __post_init__(self):
        for p in self.primitives:
            if not (0 <= p.class_id < self.num_classes):
                raise DomainError(f"class id {p.class_id} outside 0..{self.num_classes - 1}")
        if self.primitives and not (rasterize_labels(self) != FREE).any():
            raise DomainError("no primitive intersects the grid volume")

    def to_json(self) -> dict:
        return {
            "grid": self.spec.to_json(),
            "num_classes": self.num_classes,
            "seed": self.seed,
            "tau_occ": self.tau_occ,
            "class_names": list(self.class_names),
            "primitives": [p.to_json() for p in self.primitives],
            "rig": rig_to_json(self.rig),
        }


def scene_from_json(doc: dict) -> SceneConfig:
    spec = VoxelGridSpec.from_json(doc["grid"])
    rig_doc = doc["rig"]
    if isinstance(rig_doc, dict) and "ring" in rig_doc:
        rig = ring_rig(**rig_doc["ring"])
    else:
        rig = rig_from_json(rig_doc)
    return SceneConfig(
        primitives=[primitive_from_json(p) for p in doc["primitives"]],
        rig=rig,
        spec=spec,
        num_classes=int(doc["num_classes"]),
        seed=int(doc.get("seed", 0)),
        tau_occ=float(doc.get("tau_occ", TAU_OCC)),
        class_names=list(doc.get("class_names", [])),
    )


def load_scene(path) -> SceneConfig:
    return scene_from_json(json.loads(Path(path).read_text()))


def save_scene(scene: SceneConfig, path) -> None:
    Path(path).write_text(json.dumps(scene.to_json(), indent=2))


def bundled_scene_path(name: str) -> Path:
    p = Path(__file__).parent / "data" / f"{name}.json"
    if not p.exists():
        raise DomainError(f"no bundled scene named {name!r}")
    return p


def rasterize_labels(scene: SceneConfig) -> np.ndarray:
    centers = voxel_centers(scene.spec)
    labels = np.full(len(centers), FREE, dtype=np.uint8)
    for p in scene.primitives:
        labels[p.contains(centers)] = p.class_id
    return labels.reshape(scene.spec.dims)


def rasterize_scene(scene: SceneConfig):
    """Center-containment voxelization: ``(SemanticOccupancy, ScalarField density)``."""
    labels = rasterize_labels(scene)
    occ = SemanticOccupancy(scene.spec, labels, scene.num_classes)
    density = np.where(labels != FREE, scene.tau_occ, 0.0)
    return occ, ScalarField(scene.spec, density)


def first_hit(scene: SceneConfig, origins: np.ndarray, dirs: np.ndarray, t_min: float = 1e-6):
    """First intersection of each ray with the grid-clipped scene.

    Returns ``(t, class_id, normal, hit)``; ``t`` is the distance along the
    unit direction and normals are outward and unit length.
    """
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n_rays = len(o)
    spec = scene.spec
    be, bx = ray_aabb(o, d, spec)
    _, _, bn = _slab_interval(o, d, np.asarray(spec.min_corner), np.asarray(spec.max_corner))
    best_t = np.full(n_rays, np.inf)
    best_c = np.full(n_rays, -1, dtype=np.int64)
    best_n = np.zeros((n_rays, 3))
    for p in scene.primitives:
        t0, t1, pn = p.interval(o, d)
        # entry into primitive ∩ box: the later of the two entries
        use_box = be > t0
        te = np.where(use_box, be, t0)
        tx = np.minimum(t1, bx)
        nrm = np.where(use_box[:, None], bn, pn)
        ok = (te <= tx) & (te > t_min) & np.isfinite(te)
        better = ok & (te < best_t)
        best_t = np.where(better, te, best_t)
        best_c = np.where(better, p.class_id, best_c)
        best_n = np.where(better[:, None], nrm, best_n)
    hit = np.isfinite(best_t)
    norm = np.linalg.norm(best_n, axis=1, keepdims=True)
    best_n = np.where(hit[:, None], best_n / np.where(norm > 0, norm, 1.0), 0.0)
    return np.where(hit, best_t, 0.0), best_c, best_n, hit


@dataclass
class GTLabels:
    depth: np.ndarray
    semantic: np.ndarray
    normal: np.ndarray
    mask: np.ndarray


def render_gt_labels(scene: SceneConfig, camera: Camera, supersample: int = 1) -> GTLabels:
    """Dense analytic depth (ray distance), class and world-frame normal per pixel.

    With ``supersample > 1`` each pixel averages an ``s x s`` grid of sub-rays;
    the pixel is labeled only when every sub-ray hits, and takes the majority class.
    """
    h, w = camera.height, camera.width
    s = int(supersample)
    if s < 1:
        raise DomainError("supersample must be >= 1")
    if s == 1:
        o, d = camera_rays(camera)
        t, c, n, hit = first_hit(scene, o, d)
        return GTLabels(t.reshape(h, w), c.reshape(h, w), n.reshape(h, w, 3), hit.reshape(h, w))
    from .geometry import pixel_directions

    offs = (np.arange(s) + 0.5) / s - 0.5
    vv, uu = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    ts, cs, ns, hs = [], [], [], []
    for dv in offs:
        for du in offs:
            d = pixel_directions(camera, uu.ravel() + du, vv.ravel() + dv)
            o = np.broadcast_to(camera.extrinsics.center, d.shape)
            t, c, n, hit = first_hit(scene, o, d)
            ts.append(t), cs.append(c), ns.append(n), hs.append(hit)
    hits = np.stack(hs)
    mask = hits.all(axis=0)
    depth = np.mean(ts, axis=0)
    cls = np.stack(cs)
    votes = np.stack([(cls == k).sum(axis=0) for k in range(scene.num_classes)])
    sem = np.where(mask, votes.argmax(axis=0), -1)
    nsum = np.sum(ns, axis=0)
    nn = np.linalg.norm(nsum, axis=1, keepdims=True)
    normal = np.where(mask[:, None], nsum / np.where(nn > 0, nn, 1.0), 0.0)
    return GTLabels(
        np.where(mask, depth, 0.0).reshape(h, w), sem.reshape(h, w), normal.reshape(h, w, 3), mask.reshape(h, w)
    )


def lidar_directions(n_beams: int, n_azimuth: int, rng: np.random.Generator,
                     elevation_deg=(-30.0, 10.0)) -> np.ndarray:
    """Spherical beam pattern: evenly spaced elevations, jittered azimuth columns."""
    if n_beams < 1 or n_azimuth < 1:
        raise DomainError("n_beams and n_azimuth must be >= 1")
    lo, hi = np.radians(elevation_deg)
    elev = np.linspace(lo, hi, n_beams) if n_beams > 1 else np.array([0.5 * (lo + hi)])
    az = (np.arange(n_azimuth) + rng.uniform(size=n_azimuth)) * (2 * np.pi / n_azimuth)
    el, a = np.meshgrid(elev, az, indexing="ij")
    return np.stack([np.cos(el) * np.cos(a), np.cos(el) * np.sin(a), np.sin(el)], axis=-1).reshape(-1, 3)


@dataclass
class LidarHits:
    points: np.ndarray
    class_ids: np.ndarray
    ranges: np.ndarray


def simulate_lidar(scene: SceneConfig, sensor_origin, n_beams: int = 32, n_azimuth: int = 360, seed: int = 0,
                   elevation_deg=(-30.0, 10.0)) -> LidarHits:
    rng = np.random.default_rng(seed)
    d = lidar_directions(n_beams, n_azimuth, rng, elevation_deg)
    o = np.broadcast_to(np.asarray(sensor_origin, dtype=np.float64), d.shape)
    t, c, _, hit = first_hit(scene, o, d)
    pts = o[hit] + t[hit, None] * d[hit]
    return LidarHits(pts, c[hit], t[hit])


@dataclass
class SparseLabels:
    depth: np.ndarray
    semantic: np.ndarray
    mask: np.ndarray


def project_labels(hits: LidarHits, camera: Camera) -> SparseLabels:
    """Z-buffered projection of LiDAR hits; depth is camera-frame z (nearest hit wins)."""
    h, w = camera.height, camera.width
    depth = np.zeros((h, w))
    sem = np.full((h, w), -1, dtype=np.int64)
    mask = np.zeros((h, w), dtype=bool)
    if len(hits.points) == 0:
        return SparseLabels(depth, sem, mask)
    u, v, z, ok = project_points(camera, hits.points)
    col = np.floor(u + 0.5).astype(np.int64)
    row = np.floor(v + 0.5).astype(np.int64)
    ok = ok & (col >= 0) & (col < w) & (row >= 0) & (row < h)
    idx = np.nonzero(ok)[0]
    # far-to-near so the nearest hit is written last
    idx = idx[np.argsort(-z[idx], kind="stable")]
    depth[row[idx], col[idx]] = z[idx]
    sem[row[idx], col[idx]] = hits.class_ids[idx]
    mask[row[idx], col[idx]] = True
    return SparseLabels(depth, sem, mask)


def zdepth_to_distance(camera: Camera, zdepth: np.ndarray) -> np.ndarray:
    """Convert a camera-z depth map to distance along each pixel's unit ray."""
    k = camera.intrinsics
    vv, uu = np.meshgrid(np.arange(camera.height), np.arange(camera.width), indexing="ij")
    x = (uu - k.cx) / k.fx
    y = (vv - k.cy) / k.fy
    return zdepth * np.sqrt(1.0 + x * x + y * y)


def observed_mask(occ: SemanticOccupancy, rig: CameraRig, resolution: Optional[tuple] = None,
                  step_factor: float = 0.1) -> np.ndarray:
    """Voxels seen by at least one camera ray.

    Each pixel ray is marched through the occupancy grid; voxels traversed up
    to and including the first occupied voxel are marked observed.
    """
    spec = occ.spec
    seen = np.zeros(spec.n_voxels, dtype=bool)
    occ_flat = (occ.labels.reshape(-1) < occ.num_classes)
    step = step_factor * spec.voxel_size
    dims = np.asarray(spec.dims)
    for cam in rig.by_id():
        if resolution is not None:
            cam = cam.with_resolution(*resolution)
        o, d = camera_rays(cam)
        te, tx = ray_aabb(o, d, spec)
        te = np.maximum(te, 0.0)
        live = np.nonzero(tx > te)[0]
        o, d, te, tx = o[live], d[live], te[live], tx[live]
        blocked = np.zeros(len(o), dtype=bool)
        n_steps = int(np.ceil(np.max(tx - te, initial=0.0) / step)) + 1
        for i in range(n_steps):
            t = te + (i + 0.5) * step
            act = (~blocked) & (t < tx)
            if not act.any():
                break
            p = o[act] + t[act, None] * d[act]
            cell = np.floor((p - np.asarray(spec.min_corner)) / spec.voxel_size).astype(np.int64)
            cell = np.clip(cell, 0, dims - 1)
            flat = (cell[:, 0] * dims[1] + cell[:, 1]) * dims[2] + cell[:, 2]
            seen[flat] = True
            rows = np.nonzero(act)[0]
            blocked[rows[occ_flat[flat]]] = True
    return seen.reshape(spec.dims)


def camera_frame_normals(camera: Camera, normals_world: np.ndarray) -> np.ndarray:
    return np.asarray(normals_world) @ camera.extrinsics.rotation.T


def default_scene(n_cameras: int = 6, dims=(32, 32, 32), voxel_size: float = 0.25, width: int = 64) -> SceneConfig:
    """Ground plane plus two boxes and a sphere inside a cubic grid, ring cameras looking in."""
    h = dims[0] * voxel_size / 2
    spec = VoxelGridSpec((-h, -h, -0.5), voxel_size, dims)
    prims = [
        GroundPlane(0.0, 0),
        Box((-1.5, -1.0, 0.75), (1.5, 2.0, 1.5), 1),
        Sphere((1.5, 1.2, 1.0), 1.0, 2),
        Box((1.0, -2.0, 0.5), (1.0, 1.0, 1.0), 3),
    ]
    rig = ring_rig(n_cameras, radius=9.0, height=5.0, center=(0.0, 0.0, 0.0), width=width, height_px=width,
                   fov_deg=55.0, inward=True, target_height=0.5)
    return SceneConfig(prims, rig, spec, num_classes=4, class_names=["ground", "box", "sphere", "crate"])


def camera_depth_to_world(camera: Camera, depth: np.ndarray) -> np.ndarray:
    """World points for a ray-distance depth map (row-major pixels)."""
    o, d = camera_rays(camera)
    return o + depth.reshape(-1, 1) * d

