"""Ablation drivers: step size (scene fitting) and supervision mode (feed-forward)."""

from __future__ import annotations

import math
from dataclasses import replace
from typing import Optional

import numpy as np

from .errors import DomainError
from .geometry import CameraRig, ring_rig, transform_rig
from .learn.pipeline import Frame, TrainConfig, fit_scene, substream, targets_from_scene, train_feedforward
from .lift import FeatureMap
from .render import SamplerConfig, render_view
from .scenes import Box, GroundPlane, SceneConfig, Sphere, observed_mask, render_gt_labels
from .voxel import VoxelGridSpec

STEP_FACTORS = (0.5, 1.0, 2.0)
SUPERVISION_MODES = ("3d", "3d+2d")


def grid_center(spec: VoxelGridSpec) -> np.ndarray:
    return np.asarray(spec.min_corner) + 0.5 * np.asarray(spec.dims) * spec.voxel_size


def heldout_rig(rig: CameraRig, spec: VoxelGridSpec, angle_deg: Optional[float] = None) -> CameraRig:
    """The training rig turned about the vertical axis through the grid center.

    The default angle is half the mean azimuth spacing, so held-out views fall
    between training views.
    """
    if angle_deg is None:
        angle_deg = 180.0 / len(rig)
    a = math.radians(angle_deg)
    rz = np.array([[math.cos(a), -math.sin(a), 0.0], [math.sin(a), math.cos(a), 0.0], [0.0, 0.0, 1.0]])
    c = grid_center(spec)
    # camera moved by rz about c  <=>  world moved by rz^T
    return transform_rig(rig, rz.T, c - rz.T @ c)


def depth_mae(density, scene: SceneConfig, rig: CameraRig, sampler: SamplerConfig, threads: int = 1) -> float:
    """Mean |rendered - analytic| ray depth over the non-sky pixels of every camera in ``rig``."""
    err = 0.0
    n = 0
    for cam in rig.by_id():
        gt = render_gt_labels(scene, cam)
        rm = render_view(cam, density, cfg=sampler, threads=threads)
        err += float(np.abs(rm.depth - gt.depth)[gt.mask].sum())
        n += int(gt.mask.sum())
    return err / n if n else float("nan")


def ablate_step(scene: SceneConfig, cfg: TrainConfig, factors=STEP_FACTORS, heldout: Optional[CameraRig] = None,
                on_row=None) -> list:
    """Fit the scene once per step factor and report held-out depth MAE and occupancy scores."""
    factors = list(factors)
    if not factors:
        raise DomainError("empty run list")
    targets = targets_from_scene(scene)
    obs = observed_mask(targets.gt_occ, scene.rig)
    held = heldout if heldout is not None else heldout_rig(scene.rig, scene.spec)
    rows = []
    for f in factors:
        run = replace(cfg, sampler=cfg.sampler.with_step_factor(f, scene.spec))
        res = fit_scene(targets, scene.rig, scene.spec, scene.num_classes, run, observed=obs)
        final = res.trace[-1]
        row = {
            "step_factor": f,
            "step": run.sampler.step,
            "heldout_depth_mae": depth_mae(res.density, scene, held, run.sampler, run.threads),
            "iou": final.get("iou"),
            "miou": final.get("miou"),
            "final_loss": final["loss"],
        }
        rows.append(row)
        if on_row is not None:
            on_row(row)
    return rows


# --- feed-forward toy data --------------------------------------------------

def random_scene(rng: np.random.Generator, spec: VoxelGridSpec, rig: CameraRig, num_classes: int = 4,
                 n_objects: int = 3, seed: int = 0) -> SceneConfig:
    """Ground plane (class 0) plus random boxes and spheres of classes 1..C-1 resting on it."""
    c = grid_center(spec)
    half = 0.5 * spec.dims[0] * spec.voxel_size
    prims = [GroundPlane(0.0, 0)]
    for _ in range(n_objects):
        cls = int(rng.integers(1, num_classes))
        xy = c[:2] + rng.uniform(-0.6, 0.6, 2) * half
        if rng.uniform() < 0.5:
            size = rng.uniform(0.8, 2.0, 3) * half / 4
            prims.append(Box((xy[0], xy[1], size[2] / 2), tuple(size), cls))
        else:
            r = float(rng.uniform(0.5, 1.0) * half / 4)
            prims.append(Sphere((xy[0], xy[1], r), r, cls))
    return SceneConfig(prims, rig, spec, num_classes, seed=seed)


def class_embeddings(num_classes: int, channels: int, rng: np.random.Generator) -> np.ndarray:
    """Fixed random embedding per class plus one for sky (last row)."""
    return rng.normal(size=(num_classes + 1, channels))


def class_feature_maps(scene: SceneConfig, rig: CameraRig, emb: np.ndarray, stride: int, rng: np.random.Generator,
                       noise: float = 0.5) -> list:
    """Per-camera feature maps: the embedding of the first-hit class at each pixel, plus
    Gaussian noise, average-pooled over ``stride x stride`` pixel blocks."""
    maps = []
    sky = emb.shape[0] - 1
    for cam in rig.by_id():
        gt = render_gt_labels(scene, cam)
        cls = np.where(gt.mask, gt.semantic, sky)
        f = emb[cls] + noise * rng.normal(size=cls.shape + (emb.shape[1],))
        h, w = cls.shape
        hf, wf = h // stride, w // stride
        f = f[: hf * stride, : wf * stride].reshape(hf, stride, wf, stride, -1).mean(axis=(1, 3))
        maps.append(FeatureMap(cam.id, f, stride))
    return maps


def toy_setup(image: int = 32, dims=(16, 16, 16), voxel_size: float = 0.5):
    h = dims[0] * voxel_size / 2
    spec = VoxelGridSpec((-h, -h, -0.5), voxel_size, dims)
    rig = ring_rig(6, radius=9.0, height=5.0, width=image, height_px=image, fov_deg=55.0, inward=True,
                   target_height=0.5)
    return spec, rig


def make_frames(seed: int, n_frames: int, spec: VoxelGridSpec, rig: CameraRig, num_classes: int = 4,
                channels: int = 8, stride: int = 2, noise: float = 0.5, emb: Optional[np.ndarray] = None) -> list:
    """Random scenes with class-embedding feature maps and dense 2D labels.

    3D targets mark voxels unseen by every camera as IGNORE.
    """
    scene_rng = substream(seed, "scene")
    feat_rng = substream(seed, "features")
    if emb is None:
        emb = class_embeddings(num_classes, channels, substream(seed, "embedding"))
    frames = []
    for i in range(n_frames):
        sc = random_scene(scene_rng, spec, rig, num_classes, seed=seed * 1000 + i)
        maps = class_feature_maps(sc, rig, emb, stride, feat_rng, noise)
        frames.append(Frame(maps, targets_from_scene(sc, observed_only=True)))
    return frames


def ablate_supervision(cfg: TrainConfig, seeds=(0, 1, 2), modes=SUPERVISION_MODES, n_train: int = 8, n_eval: int = 2,
                       use_conv: bool = False, on_row=None, channels: int = 8, stride: int = 2, noise: float = 0.5,
                       **toy) -> list:
    """Feed-forward training per (seed, mode); held-out mIoU on fresh random scenes."""
    modes = list(modes)
    seeds = list(seeds)
    if not modes or not seeds:
        raise DomainError("empty run list")
    spec, rig = toy_setup(**toy)
    rows = []
    for s in seeds:
        frames = make_frames(s, n_train + n_eval, spec, rig, channels=channels, stride=stride, noise=noise)
        train, held = frames[:n_train], frames[n_train:]
        for m in modes:
            run = replace(cfg, supervision_mode=m, seed=s)
            res = train_feedforward(train, rig, spec, 4, run, use_conv=use_conv, eval_frames=held)
            row = {"seed": s, "mode": m, "heldout_miou": res.trace[-1]["eval_miou"], "final_loss": res.trace[-1]["loss"]}
            rows.append(row)
            if on_row is not None:
                on_row(row)
    return rows
