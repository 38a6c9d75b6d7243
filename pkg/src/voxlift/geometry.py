"""Pinhole cameras, world/camera transforms, projection and ray generation.

Conventions:

* Extrinsics map world (ego) coordinates into the camera frame:
  ``x_cam = R @ x_world + t``.
* The camera frame is x right, y down, z forward.
* An integer pixel coordinate ``(u, v)`` is the *center* of that pixel.
  A projection is in bounds when ``0 <= u < width`` and ``0 <= v < height``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DomainError

Z_MIN = 1e-4
_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise DomainError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise DomainError(f"image size must be >= 1, got {self.width}x{self.height}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, width: int, height: int) -> "Intrinsics":
        """Intrinsics for the same frustum sampled at a different resolution."""
        sx = width / self.width
        sy = height / self.height
        return Intrinsics(
            fx=self.fx * sx,
            fy=self.fy * sy,
            cx=(self.cx + 0.5) * sx - 0.5,
            cy=(self.cy + 0.5) * sy - 0.5,
            width=width,
            height=height,
        )


@dataclass(frozen=True)
class Extrinsics:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if np.abs(r.T @ r - np.eye(3)).max() > _ORTHO_TOL:
            raise DomainError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > _ORTHO_TOL:
            raise DomainError("rotation must have determinant +1")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation


@dataclass(frozen=True)
class Camera:
    intrinsics: Intrinsics
    extrinsics: Extrinsics
    id: int = 1

    @property
    def width(self) -> int:
        return self.intrinsics.width

    @property
    def height(self) -> int:
        return self.intrinsics.height

    def with_resolution(self, width: int, height: int) -> "Camera":
        return Camera(self.intrinsics.scaled(width, height), self.extrinsics, self.id)


@dataclass(frozen=True)
class CameraRig:
    cameras: tuple

    def __post_init__(self):
        cams = tuple(self.cameras)
        if not cams:
            raise DomainError("a camera rig needs at least one camera")
        ids = sorted(c.id for c in cams)
        if ids != list(range(1, len(cams) + 1)):
            raise DomainError(f"camera ids must be dense 1..{len(cams)}, got {ids}")
        object.__setattr__(self, "cameras", cams)

    def __len__(self) -> int:
        return len(self.cameras)

    def __iter__(self):
        return iter(self.cameras)

    def by_id(self) -> list:
        """Cameras sorted by id."""
        return sorted(self.cameras, key=lambda c: c.id)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise DomainError("ray direction must be unit length")
        if not (0.0 <= self.t_near < self.t_far):
            raise DomainError(f"need 0 <= t_near < t_far, got {self.t_near}, {self.t_far}")

    def at(self, t: float) -> np.ndarray:
        return np.asarray(self.origin) + t * np.asarray(self.direction)


def world_to_camera(camera: Camera, points: np.ndarray) -> np.ndarray:
    """Transform (N, 3) world points into the camera frame.

    Written out per component (rather than with a matmul) so that the result is
    bit-identical to the scalar path in :func:`project_point`.
    """
    p = np.asarray(points, dtype=np.float64)
    r = camera.extrinsics.rotation
    t = camera.extrinsics.translation
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    xc = r[0, 0] * x + r[0, 1] * y + r[0, 2] * z + t[0]
    yc = r[1, 0] * x + r[1, 1] * y + r[1, 2] * z + t[1]
    zc = r[2, 0] * x + r[2, 1] * y + r[2, 2] * z + t[2]
    return np.stack([xc, yc, zc], axis=-1)


def project_points(camera: Camera, points: np.ndarray, z_min: float = Z_MIN):
    """Vectorized projection.

    Returns ``(u, v, z, valid)`` arrays. ``u``/``v`` are finite only where the
    point is in front of the camera; ``valid`` additionally requires in-bounds.
    """
    pc = world_to_camera(camera, points)
    k = camera.intrinsics
    z = pc[..., 2]
    front = z > z_min
    safe_z = np.where(front, z, 1.0)
    u = k.fx * pc[..., 0] / safe_z + k.cx
    v = k.fy * pc[..., 1] / safe_z + k.cy
    valid = front & (u >= 0) & (u < k.width) & (v >= 0) & (v < k.height)
    return u, v, z, valid


def project_point(camera: Camera, p: Sequence[float], z_min: float = Z_MIN) -> Optional[tuple]:
    """Project a world point; ``None`` when behind the camera or out of bounds."""
    r = camera.extrinsics.rotation
    t = camera.extrinsics.translation
    x, y, z = (float(c) for c in p)
    xc = r[0, 0] * x + r[0, 1] * y + r[0, 2] * z + t[0]
    yc = r[1, 0] * x + r[1, 1] * y + r[1, 2] * z + t[1]
    zc = r[2, 0] * x + r[2, 1] * y + r[2, 2] * z + t[2]
    if not zc > z_min:
        return None
    k = camera.intrinsics
    u = k.fx * xc / zc + k.cx
    v = k.fy * yc / zc + k.cy
    if not (0 <= u < k.width and 0 <= v < k.height):
        return None
    return float(u), float(v), float(zc)


def pixel_directions(camera: Camera, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Unit world-frame directions through pixel coordinates ``(u, v)``."""
    k = camera.intrinsics
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    dc = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], axis=-1)
    dc /= np.linalg.norm(dc, axis=-1, keepdims=True)
    return dc @ camera.extrinsics.rotation


def ray_through_pixel(camera: Camera, u: float, v: float, t_near: float, t_far: float) -> Ray:
    k = camera.intrinsics
    if not (0 <= u < k.width and 0 <= v < k.height):
        raise DomainError(f"pixel ({u}, {v}) outside {k.width}x{k.height} image")
    d = pixel_directions(camera, np.array([u]), np.array([v]))[0]
    return Ray(camera.extrinsics.center, d, float(t_near), float(t_far))


def pixel_grid(width: int, height: int) -> tuple:
    """Row-major pixel-center coordinates ``(u, v)`` for a ``height x width`` image."""
    vv, uu = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    return uu.ravel(), vv.ravel()


def camera_rays(camera: Camera) -> tuple:
    """Origins and directions of one ray per pixel, row-major, shape (H*W, 3)."""
    u, v = pixel_grid(camera.width, camera.height)
    d = pixel_directions(camera, u, v)
    o = np.broadcast_to(camera.extrinsics.center, d.shape).copy()
    return o, d


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Extrinsics:
    """World->camera extrinsics for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    n = np.linalg.norm(right)
    if n < 1e-12:
        raise DomainError("viewing direction is parallel to the up vector")
    right /= n
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    return Extrinsics(rot, -rot @ eye)


def ring_rig(
    n_cameras: int = 6,
    radius: float = 10.0,
    height: float = 4.0,
    center=(0.0, 0.0, 0.0),
    width: int = 64,
    height_px: int = 64,
    fov_deg: float = 60.0,
    inward: bool = True,
    target_height: Optional[float] = None,
    phase_deg: float = 0.0,
) -> CameraRig:
    """Cameras on a horizontal ring at equal azimuth spacing.

    ``inward=True`` points every camera at the ring center (object-centric
    fitting). ``inward=False`` mimics a vehicle surround rig: cameras sit near
    the center and look outward. ``phase_deg`` rotates the whole ring.
    """
    center = np.asarray(center, dtype=np.float64)
    f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
    intr = Intrinsics(f, f, (width - 1) / 2, (height_px - 1) / 2, width, height_px)
    th = center[2] if target_height is None else target_height
    cams = []
    for i in range(n_cameras):
        a = 2 * math.pi * i / n_cameras + math.radians(phase_deg)
        ring = np.array([math.cos(a), math.sin(a), 0.0])
        if inward:
            eye = center + radius * ring + np.array([0.0, 0.0, height])
            target = np.array([center[0], center[1], th])
        else:
            eye = center + np.array([0.0, 0.0, height])
            target = eye + ring * radius + np.array([0.0, 0.0, th - height])
        cams.append(Camera(intr, look_at(eye, target), i + 1))
    return CameraRig(tuple(cams))


def transform_rig(rig: CameraRig, rotation, translation) -> CameraRig:
    """Re-express a rig after moving the world by ``x' = rotation @ x + translation``."""
    g = np.asarray(rotation, dtype=np.float64)
    tg = np.asarray(translation, dtype=np.float64)
    cams = []
    for c in rig.cameras:
        r = c.extrinsics.rotation @ g.T
        t = c.extrinsics.translation - r @ tg
        cams.append(Camera(c.intrinsics, Extrinsics(r, t), c.id))
    return CameraRig(tuple(cams))


def rig_to_json(rig: CameraRig) -> list:
    out = []
    for c in rig.by_id():
        k = c.intrinsics
        out.append(
            {
                "id": c.id,
                "fx": k.fx,
                "fy": k.fy,
                "cx": k.cx,
                "cy": k.cy,
                "width": k.width,
                "height": k.height,
                "rotation": [float(x) for x in c.extrinsics.rotation.ravel()],
                "translation": [float(x) for x in c.extrinsics.translation],
            }
        )
    return out


def rig_from_json(doc: Iterable[dict]) -> CameraRig:
    cams = []
    for d in doc:
        rot = np.asarray(d["rotation"], dtype=np.float64)
        if rot.size != 9:
            raise DomainError("rotation must hold 9 row-major floats")
        intr = Intrinsics(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), int(d["width"]), int(d["height"]))
        cams.append(Camera(intr, Extrinsics(rot.reshape(3, 3), np.asarray(d["translation"], dtype=np.float64)), int(d["id"])))
    return CameraRig(tuple(cams))


def save_rig(rig: CameraRig, path) -> None:
    Path(path).write_text(json.dumps(rig_to_json(rig), indent=2))


def load_rig(path) -> CameraRig:
    return rig_from_json(json.loads(Path(path).read_text()))
