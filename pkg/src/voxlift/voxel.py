"""Voxel grid geometry, fields over grids, trilinear sampling and occupancy decoding.

Voxel ``(i, j, k)`` has its center at ``min_corner + (i + 0.5, j + 0.5, k + 0.5) * voxel_size``.
Arrays are indexed ``[i, j, k]`` (x, y, z) and flattened row-major, i outermost.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError

FREE = 255
IGNORE = 254

# corner c of a cell is offset ((c >> 2) & 1, (c >> 1) & 1, c & 1)
CORNER_OFFSETS = np.array([[(c >> 2) & 1, (c >> 1) & 1, c & 1] for c in range(8)], dtype=np.int64)


@dataclass(frozen=True)
class VoxelGridSpec:
    min_corner: tuple
    voxel_size: float
    dims: tuple

    def __post_init__(self):
        mc = tuple(float(x) for x in self.min_corner)
        dims = tuple(int(x) for x in self.dims)
        if len(mc) != 3 or len(dims) != 3:
            raise DomainError("min_corner and dims need three components")
        if not self.voxel_size > 0:
            raise DomainError(f"voxel_size must be positive, got {self.voxel_size}")
        if min(dims) < 1:
            raise DomainError(f"dims must be >= 1, got {dims}")
        object.__setattr__(self, "min_corner", mc)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "voxel_size", float(self.voxel_size))

    @property
    def max_corner(self) -> tuple:
        return tuple(m + d * self.voxel_size for m, d in zip(self.min_corner, self.dims))

    @property
    def n_voxels(self) -> int:
        h, w, z = self.dims
        return h * w * z

    def to_json(self) -> dict:
        return {"min_corner": list(self.min_corner), "voxel_size": self.voxel_size, "dims": list(self.dims)}

    @classmethod
    def from_json(cls, d: dict) -> "VoxelGridSpec":
        return cls(tuple(d["min_corner"]), float(d["voxel_size"]), tuple(d["dims"]))


def _check_shape(spec: VoxelGridSpec, values: np.ndarray, channels=None):
    want = spec.dims if channels is None else spec.dims + (channels,)
    if values.shape != want:
        raise DomainError(f"field shape {values.shape} does not match grid {want}")


@dataclass
class ScalarField:
    spec: VoxelGridSpec
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        _check_shape(self.spec, self.values)


@dataclass
class VectorField:
    spec: VoxelGridSpec
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 4 or self.values.shape[3] < 1:
            raise DomainError("vector field needs a positive channel axis")
        _check_shape(self.spec, self.values, self.values.shape[3])

    @property
    def channels(self) -> int:
        return self.values.shape[3]


@dataclass
class FeatureVolume:
    spec: VoxelGridSpec
    values: np.ndarray
    valid_count: np.ndarray

    @property
    def channels(self) -> int:
        return self.values.shape[3]


@dataclass
class SemanticOccupancy:
    spec: VoxelGridSpec
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        _check_shape(self.spec, self.labels)
        ok = (self.labels < self.num_classes) | (self.labels == FREE) | (self.labels == IGNORE)
        if not ok.all():
            raise DomainError("occupancy labels outside {0..C-1, FREE, IGNORE}")

    @property
    def occupied(self) -> np.ndarray:
        return self.labels < self.num_classes


def voxel_centers(spec: VoxelGridSpec) -> np.ndarray:
    """All voxel centers as an (H*W*Z, 3) array in row-major (i, j, k) order."""
    h, w, z = spec.dims
    ii, jj, kk = np.meshgrid(np.arange(h), np.arange(w), np.arange(z), indexing="ij")
    idx = np.stack([ii.ravel(), jj.ravel(), kk.ravel()], axis=1).astype(np.float64)
    return np.asarray(spec.min_corner) + (idx + 0.5) * spec.voxel_size


def inside_grid(spec: VoxelGridSpec, points: np.ndarray) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    lo = np.asarray(spec.min_corner)
    hi = np.asarray(spec.max_corner)
    return np.all((p >= lo) & (p <= hi), axis=-1)


def trilinear_taps(spec: VoxelGridSpec, points: np.ndarray):
    """Flat voxel indices (N, 8) and trilinear weights (N, 8) for each point.

    The weights are the partial derivatives of the sampled value with respect
    to the corresponding voxel parameters. Corners outside the array and
    points outside the grid box get weight 0 (index clamped to 0).
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    dims = np.asarray(spec.dims)
    g = (p - np.asarray(spec.min_corner)) / spec.voxel_size - 0.5
    i0 = np.floor(g).astype(np.int64)
    f = g - i0
    corner = i0[:, None, :] + CORNER_OFFSETS[None, :, :]
    frac = np.where(CORNER_OFFSETS[None, :, :] == 1, f[:, None, :], 1.0 - f[:, None, :])
    w = frac[..., 0] * frac[..., 1] * frac[..., 2]
    ok = np.all((corner >= 0) & (corner < dims), axis=-1) & inside_grid(spec, p)[:, None]
    flat = (corner[..., 0] * dims[1] + corner[..., 1]) * dims[2] + corner[..., 2]
    return np.where(ok, flat, 0), np.where(ok, w, 0.0)


def nearest_index(spec: VoxelGridSpec, points: np.ndarray):
    """Flat index of the containing voxel and an in-grid flag."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    dims = np.asarray(spec.dims)
    cell = np.floor((p - np.asarray(spec.min_corner)) / spec.voxel_size).astype(np.int64)
    ok = np.all((cell >= 0) & (cell < dims), axis=-1)
    flat = (cell[:, 0] * dims[1] + cell[:, 1]) * dims[2] + cell[:, 2]
    return np.where(ok, flat, 0), ok


def trilinear_sample(field, points: np.ndarray) -> np.ndarray:
    """Sample a scalar or vector field at world points (zero outside the grid)."""
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    idx, w = trilinear_taps(field.spec, pts)
    if isinstance(field, ScalarField):
        flat = field.values.reshape(-1)
        out = np.sum(w * flat[idx], axis=1)
    else:
        flat = field.values.reshape(-1, field.channels)
        out = np.einsum("nc,nck->nk", w, flat[idx])
    return out[0] if single else out


def decode_occupancy(logits: VectorField, num_classes: int) -> SemanticOccupancy:
    """Per-voxel argmax over ``num_classes`` semantic channels plus a trailing FREE channel."""
    if logits.channels != num_classes + 1:
        raise DomainError(f"expected {num_classes + 1} channels (C classes + FREE), got {logits.channels}")
    arg = np.argmax(logits.values, axis=3)
    labels = np.where(arg == num_classes, FREE, arg).astype(np.uint8)
    return SemanticOccupancy(logits.spec, labels, num_classes)


# --- binary tensor format --------------------------------------------------

_DTYPES = {"f32": "<f4", "f64": "<f8", "u8": "u1"}


def _paths(stem):
    stem = Path(stem)
    if stem.suffix in (".json", ".bin"):
        stem = stem.with_suffix("")
    return stem.with_suffix(".json"), stem.with_suffix(".bin")


def write_tensor(stem, array: np.ndarray, dtype: str = "f64", **header) -> Path:
    """Write ``<stem>.json`` (header) and ``<stem>.bin`` (little-endian row-major data)."""
    if dtype not in _DTYPES:
        raise DomainError(f"unsupported dtype {dtype!r}")
    hpath, bpath = _paths(stem)
    hpath.parent.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(np.asarray(array).astype(_DTYPES[dtype]))
    head = {"dtype": dtype, "dims": list(arr.shape), "layout": "row-major"}
    head.update(header)
    hpath.write_text(json.dumps(head, indent=2, sort_keys=True))
    bpath.write_bytes(arr.tobytes())
    return hpath


def read_tensor(stem):
    """Inverse of :func:`write_tensor`; returns ``(array, header)``."""
    hpath, bpath = _paths(stem)
    head = json.loads(hpath.read_text())
    if head.get("layout", "row-major") != "row-major":
        raise DomainError("only row-major tensors are supported")
    arr = np.frombuffer(bpath.read_bytes(), dtype=_DTYPES[head["dtype"]]).reshape(head["dims"])
    return arr.copy(), head


def save_field(stem, field, dtype: str = "f64") -> Path:
    vals = field.values
    kind = "vector"
    if vals.ndim == 3:
        vals = vals[..., None]
        kind = "scalar"
    return write_tensor(
        stem, vals, dtype, min_corner=list(field.spec.min_corner), voxel_size=field.spec.voxel_size, kind=kind
    )


def load_field(stem):
    arr, head = read_tensor(stem)
    spec = VoxelGridSpec(tuple(head["min_corner"]), head["voxel_size"], tuple(head["dims"][:3]))
    if head["dims"][3] == 1 and head.get("kind") != "vector":
        return ScalarField(spec, arr[..., 0].astype(np.float64))
    return VectorField(spec, arr.astype(np.float64))


def save_occupancy(stem, occ: SemanticOccupancy) -> Path:
    return write_tensor(
        stem,
        occ.labels[..., None],
        "u8",
        min_corner=list(occ.spec.min_corner),
        voxel_size=occ.spec.voxel_size,
        num_classes=occ.num_classes,
        free=FREE,
        ignore=IGNORE,
    )


def load_occupancy(stem) -> SemanticOccupancy:
    arr, head = read_tensor(stem)
    spec = VoxelGridSpec(tuple(head["min_corner"]), head["voxel_size"], tuple(head["dims"][:3]))
    return SemanticOccupancy(spec, arr[..., 0], int(head["num_classes"]))
