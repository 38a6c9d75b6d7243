"""Image export: PFM for float maps, PPM for class and normal maps.

Class palette (RGB) is indexed by class id; pixels without a class (sky, no
surface, FREE) are black.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .render import RenderedMaps
from .voxel import write_tensor

PALETTE = np.array(
    [
        (128, 64, 128),
        (220, 20, 60),
        (0, 142, 0),
        (255, 165, 0),
        (70, 130, 180),
        (250, 170, 30),
        (153, 153, 153),
        (107, 142, 35),
        (152, 251, 152),
        (0, 0, 142),
        (119, 11, 32),
        (190, 153, 153),
        (102, 102, 156),
        (244, 35, 232),
        (70, 70, 70),
        (0, 60, 100),
        (0, 80, 100),
    ],
    dtype=np.uint8,
)
NO_CLASS = (0, 0, 0)


def write_pfm(path, image: np.ndarray) -> None:
    """Single-channel little-endian PFM (scale -1), rows stored bottom to top."""
    img = np.asarray(image, dtype="<f4")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(img[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    kind, dims, scale = parts[0], parts[1], float(parts[2])
    if kind != b"Pf":
        raise ValueError("only single-channel PFM is supported")
    w, h = map(int, dims.split())
    dt = "<f4" if scale < 0 else ">f4"
    return np.frombuffer(parts[3], dtype=dt, count=w * h).reshape(h, w)[::-1].astype(np.float64)


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(rgb).tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h * 3).reshape(h, w, 3)


def colorize_classes(labels: np.ndarray) -> np.ndarray:
    lab = np.asarray(labels, dtype=np.int64)
    ok = (lab >= 0) & (lab < len(PALETTE))
    out = np.zeros(lab.shape + (3,), dtype=np.uint8)
    out[ok] = PALETTE[lab[ok]]
    out[~ok] = NO_CLASS
    return out


def colorize_normals(normals: np.ndarray) -> np.ndarray:
    n = np.asarray(normals, dtype=np.float64)
    return np.clip(np.round((n + 1.0) * 127.5), 0, 255).astype(np.uint8)


def export_maps(out_dir, stem: str, maps: RenderedMaps, num_classes: int) -> list:
    """Depth/opacity PFM, class-argmax and normal PPM, and raw logits as a tensor."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_pfm(out / f"{stem}_depth.pfm", maps.depth)
    write_pfm(out / f"{stem}_opacity.pfm", maps.opacity)
    files = [f"{stem}_depth.pfm", f"{stem}_opacity.pfm"]
    if maps.sem_logits.shape[-1]:
        lab = np.argmax(maps.sem_logits[..., :num_classes], axis=-1)
        lab = np.where(maps.opacity > 0.5, lab, -1)
        write_ppm(out / f"{stem}_semantic.ppm", colorize_classes(lab))
        write_tensor(out / f"{stem}_logits", maps.sem_logits, "f32")
        files += [f"{stem}_semantic.ppm", f"{stem}_logits.json"]
    write_ppm(out / f"{stem}_normal.ppm", colorize_normals(maps.normal))
    files.append(f"{stem}_normal.ppm")
    return files
