"""2D->3D feature lifting by projection, bilinear sampling and multi-view averaging.

Feature-grid coordinates: feature cell ``(row, col)`` covers image pixels
``col*stride .. col*stride + stride - 1`` horizontally, so image pixel ``u``
maps to ``u_f = (u + 0.5) / stride - 0.5``. A sample is inside the feature grid
when ``0 <= u < width_f * stride`` and ``0 <= v < height_f * stride`` (the same
convention as image bounds); taps beyond the outermost cell centers clamp to
the edge cells.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .geometry import CameraRig, project_points
from .voxel import FeatureVolume, VoxelGridSpec, read_tensor, voxel_centers, write_tensor

PROJ_MACS = 15
DEFAULT_N_KEYS = 8


@dataclass
class FeatureMap:
    camera_id: int
    values: np.ndarray
    stride: float = 1.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise DomainError("feature map values must be (height_f, width_f, channels)")
        if not self.stride > 0:
            raise DomainError("stride must be positive")

    @property
    def height_f(self) -> int:
        return self.values.shape[0]

    @property
    def width_f(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class MacReport:
    lifting_macs: int
    attention_macs: int
    ratio: float

    def to_json(self) -> dict:
        return {"lifting_macs": self.lifting_macs, "attention_macs": self.attention_macs, "ratio": self.ratio}


def bilinear_taps(fm: FeatureMap, u, v):
    """Tap cells and weights for image-pixel coordinates.

    Returns ``(rows, cols, weights, valid)`` with shapes (N, 4), (N, 4), (N, 4), (N,).
    Tap order is (r0,c0), (r0,c1), (r1,c0), (r1,c1). Invalid samples have zero weights.
    """
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    v = np.atleast_1d(np.asarray(v, dtype=np.float64))
    s = fm.stride
    valid = (u >= 0) & (u < fm.width_f * s) & (v >= 0) & (v < fm.height_f * s)
    uf = np.clip(np.where(valid, (u + 0.5) / s - 0.5, 0.0), 0.0, fm.width_f - 1)
    vf = np.clip(np.where(valid, (v + 0.5) / s - 0.5, 0.0), 0.0, fm.height_f - 1)
    c0 = np.minimum(np.floor(uf).astype(np.int64), max(fm.width_f - 2, 0))
    r0 = np.minimum(np.floor(vf).astype(np.int64), max(fm.height_f - 2, 0))
    c1 = np.minimum(c0 + 1, fm.width_f - 1)
    r1 = np.minimum(r0 + 1, fm.height_f - 1)
    a = uf - c0
    b = vf - r0
    w = np.stack([(1 - a) * (1 - b), a * (1 - b), (1 - a) * b, a * b], axis=1)
    w = np.where(valid[:, None], w, 0.0)
    rows = np.stack([r0, r0, r1, r1], axis=1)
    cols = np.stack([c0, c1, c0, c1], axis=1)
    return rows, cols, w, valid


def bilinear_sample_2d(fm: FeatureMap, u, v):
    """Bilinearly sample feature vectors at pixel coordinates.

    Scalar ``(u, v)`` returns ``(feature, valid)``; arrays return ``(N, channels)``
    features and an ``(N,)`` validity mask. Invalid samples are zero.
    """
    scalar = np.ndim(u) == 0 and np.ndim(v) == 0
    rows, cols, w, valid = bilinear_taps(fm, u, v)
    f = fm.values
    out = (
        w[:, 0:1] * f[rows[:, 0], cols[:, 0]]
        + w[:, 1:2] * f[rows[:, 1], cols[:, 1]]
        + w[:, 2:3] * f[rows[:, 2], cols[:, 2]]
        + w[:, 3:4] * f[rows[:, 3], cols[:, 3]]
    )
    out = np.where(valid[:, None], out, 0.0)
    if scalar:
        return out[0], bool(valid[0])
    return out, valid


def _match_maps(rig: CameraRig, maps) -> list:
    by_id = {}
    for m in maps:
        if m.camera_id in by_id:
            raise DomainError(f"duplicate feature map for camera {m.camera_id}")
        by_id[m.camera_id] = m
    cams = rig.by_id()
    if sorted(by_id) != [c.id for c in cams]:
        raise DomainError(f"feature maps {sorted(by_id)} do not match rig cameras {[c.id for c in cams]}")
    chans = {m.channels for m in maps}
    if len(chans) != 1:
        raise DomainError(f"feature maps disagree on channel count: {sorted(chans)}")
    return [(c, by_id[c.id]) for c in cams]


def _camera_taps(cam, fm, centers):
    u, v, _, ok = project_points(cam, centers)
    rows, cols, w, inside = bilinear_taps(fm, np.where(ok, u, -1.0), np.where(ok, v, -1.0))
    valid = ok & inside
    return rows, cols, np.where(valid[:, None], w, 0.0), valid


def lift_features(rig: CameraRig, maps, spec: VoxelGridSpec, divide_by: str = "valid") -> FeatureVolume:
    """Average bilinear feature samples over the cameras that see each voxel center.

    ``divide_by="valid"`` divides by the per-voxel count of valid views;
    ``"n_cameras"`` divides by the rig size. Cameras are accumulated in id order.
    """
    if divide_by not in ("valid", "n_cameras"):
        raise DomainError(f"divide_by must be 'valid' or 'n_cameras', got {divide_by!r}")
    pairs = _match_maps(rig, maps)
    centers = voxel_centers(spec)
    n = centers.shape[0]
    ch = pairs[0][1].channels
    acc = np.zeros((n, ch))
    count = np.zeros(n, dtype=np.int64)
    for cam, fm in pairs:
        u, v, _, ok = project_points(cam, centers)
        feat, inside = bilinear_sample_2d(fm, np.where(ok, u, -1.0), np.where(ok, v, -1.0))
        valid = ok & inside
        acc = acc + np.where(valid[:, None], feat, 0.0)
        count += valid
    denom = count if divide_by == "valid" else np.full(n, len(pairs))
    vals = np.where(count[:, None] > 0, acc / np.maximum(denom, 1)[:, None], 0.0)
    return FeatureVolume(spec, vals.reshape(spec.dims + (ch,)), count.reshape(spec.dims))


def lift_backward(grad_volume: np.ndarray, rig: CameraRig, maps, spec: VoxelGridSpec, divide_by: str = "valid") -> list:
    """Adjoint of :func:`lift_features` with respect to the feature-map values.

    Returns one gradient array per entry of ``maps``, in the order given.
    """
    pairs = _match_maps(rig, maps)
    ch = pairs[0][1].channels
    g = np.asarray(grad_volume, dtype=np.float64)
    if g.shape != spec.dims + (ch,):
        raise DomainError(f"grad shape {g.shape} does not match lift output {spec.dims + (ch,)}")
    centers = voxel_centers(spec)
    g = g.reshape(-1, ch)
    taps = [_camera_taps(cam, fm, centers) for cam, fm in pairs]
    count = np.sum([t[3] for t in taps], axis=0)
    denom = count if divide_by == "valid" else np.full(count.shape, len(pairs))
    scale = np.where(count > 0, 1.0 / np.maximum(denom, 1), 0.0)
    gs = g * scale[:, None]
    out = {}
    for (cam, fm), (rows, cols, w, valid) in zip(pairs, taps):
        gm = np.zeros_like(fm.values)
        sel = np.nonzero(valid)[0]
        for k in range(4):
            np.add.at(gm, (rows[sel, k], cols[sel, k]), w[sel, k : k + 1] * gs[sel])
        out[cam.id] = gm
    return [out[m.camera_id] for m in maps]


def estimate_lift_macs(spec: VoxelGridSpec, n_cameras: int, channels: int, n_keys: int = DEFAULT_N_KEYS) -> MacReport:
    """Closed-form MAC counts: projection+bilinear lifting vs one cross-attention layer.

    Lifting costs ``PROJ_MACS`` per voxel-camera pair for the 3x4 projection
    and perspective divide, plus 4 MACs per channel for the bilinear taps.
    The attention model is a single-head deformable-style layer: each of the
    ``n_keys`` keys is a projected, bilinearly sampled point (same cost as one
    lifting tap) followed by a dot product and a weighted value sum (2 MACs
    per channel).
    """
    if min(n_cameras, channels, n_keys) < 1:
        raise DomainError("n_cameras, channels and n_keys must be positive")
    n = spec.n_voxels
    lifting = n * n_cameras * (PROJ_MACS + 4 * channels)
    attention = n * n_cameras * n_keys * (PROJ_MACS + 4 * channels + 2 * channels)
    return MacReport(int(lifting), int(attention), attention / lifting)


def save_feature_map(stem, fm: FeatureMap, dtype: str = "f32"):
    return write_tensor(stem, fm.values, dtype, camera_id=fm.camera_id, stride=fm.stride, kind="feature_map")


def load_feature_map(stem) -> FeatureMap:
    arr, head = read_tensor(stem)
    return FeatureMap(int(head["camera_id"]), arr.astype(np.float64), float(head["stride"]))
