"""Loss assembly and the two training modes.

``total_loss`` evaluates the combined objective on a set of fields (density,
C+1 semantic logits, unit normals) and returns gradients with respect to the
field values. ``fit_scene`` optimizes per-voxel fields directly;
``train_feedforward`` optimizes a volume head applied to lifted features.
"""

from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .. import kernels
from ..errors import DomainError
from ..evaluate import confusion, geometry_iou, miou
from ..geometry import CameraRig, camera_rays
from ..lift import lift_features
from ..render import SamplerConfig, grid_tuple, normalize_backward, normalize_normals, sample_rays, softmax
from ..voxel import FREE, IGNORE, FeatureVolume, ScalarField, SemanticOccupancy, VectorField, VoxelGridSpec
from .head import HeadParams, head_backward, head_forward, init_head, sigmoid, softplus
from .losses import LossWeights, loss_depth, loss_normal, loss_semantic, loss_semantic_probs, occupancy_targets
from .optim import OptimConfig, OptimizerState, adam_step

log = logging.getLogger("voxlift.learn")

MODES = ("3d", "3d+2d", "2d")


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, iteration: int, detail: str):
        super().__init__(f"diverged at iteration {iteration}: {detail}")
        self.iteration = iteration


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named purpose ("scene", "sampler", "init", ...)."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


# --- targets ----------------------------------------------------------------

@dataclass
class ViewTargets:
    """2D labels for one camera at the resolution of the maps.

    ``depth`` is distance along the pixel ray; ``normal`` is world-frame.
    A missing label kind is ``None``.
    """

    camera_id: int
    depth: Optional[np.ndarray] = None
    depth_mask: Optional[np.ndarray] = None
    semantic: Optional[np.ndarray] = None
    semantic_mask: Optional[np.ndarray] = None
    normal: Optional[np.ndarray] = None
    normal_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        shapes = set()
        for v, m in ((self.depth, self.depth_mask), (self.semantic, self.semantic_mask), (self.normal, self.normal_mask)):
            if v is None:
                continue
            if m is None or np.shape(m) != np.shape(v)[:2]:
                raise DomainError("every label map needs a mask of matching shape")
            shapes.add(np.shape(m))
        if len(shapes) > 1:
            raise DomainError("label maps of one view must share a resolution")
        if self.depth is not None and np.any(np.asarray(self.depth)[np.asarray(self.depth_mask, bool)] <= 0):
            raise DomainError("depth labels must be positive where masked in")

    @property
    def shape(self) -> Optional[tuple]:
        for m in (self.depth_mask, self.semantic_mask, self.normal_mask):
            if m is not None:
                return tuple(np.shape(m))
        return None

    def kinds(self) -> list:
        return [k for k in ("depth", "semantic", "normal") if getattr(self, k) is not None]


@dataclass
class TrainTargets:
    gt_occ: Optional[SemanticOccupancy] = None
    views: list = field(default_factory=list)

    def has_2d(self) -> bool:
        return any(v.kinds() for v in self.views)


def targets_from_scene(scene, kinds=("depth", "semantic", "normal"), source: str = "dense",
                       resolution: Optional[tuple] = None, with_occ: bool = True, observed_only: bool = False,
                       lidar_beams: int = 64, lidar_azimuth: int = 720, lidar_origin=None) -> TrainTargets:
    """Labels from the analytic scene oracle.

    ``source="dense"`` uses per-pixel first hits; ``"lidar"`` projects
    simulated LiDAR returns (sparse depth and semantics, converted to ray
    distance). Normals are always dense.
    """
    from ..scenes import observed_mask, project_labels, rasterize_scene, render_gt_labels, simulate_lidar, zdepth_to_distance

    hits = None
    if source == "lidar":
        origin = lidar_origin
        if origin is None:
            c = np.asarray(scene.spec.min_corner) + 0.5 * np.asarray(scene.spec.dims) * scene.spec.voxel_size
            origin = (c[0], c[1], scene.spec.max_corner[2] - 0.5 * scene.spec.voxel_size)
        hits = simulate_lidar(scene, origin, lidar_beams, lidar_azimuth, seed=scene.seed, elevation_deg=(-80.0, 10.0))
    elif source != "dense":
        raise DomainError(f"unknown label source {source!r}")
    views = []
    for cam in scene.rig.by_id():
        if resolution is not None:
            cam = cam.with_resolution(*resolution)
        gt = render_gt_labels(scene, cam)
        vt = {"camera_id": cam.id}
        if hits is not None:
            sp = project_labels(hits, cam)
            dist = zdepth_to_distance(cam, sp.depth)
            if "depth" in kinds:
                vt.update(depth=dist, depth_mask=sp.mask.copy())
            if "semantic" in kinds:
                vt.update(semantic=sp.semantic, semantic_mask=sp.mask.copy())
        else:
            if "depth" in kinds:
                vt.update(depth=gt.depth, depth_mask=gt.mask.copy())
            if "semantic" in kinds:
                vt.update(semantic=gt.semantic, semantic_mask=gt.mask.copy())
        if "normal" in kinds:
            vt.update(normal=gt.normal, normal_mask=gt.mask.copy())
        views.append(ViewTargets(**vt))
    occ = None
    if with_occ:
        occ, _ = rasterize_scene(scene)
        if observed_only:
            seen = observed_mask(occ, scene.rig, resolution)
            occ = SemanticOccupancy(occ.spec, np.where(seen, occ.labels, IGNORE).astype(np.uint8), occ.num_classes)
    return TrainTargets(occ, views)


@dataclass
class RayTable:
    """All supervised pixel rays of a target set, flattened in (camera id, row, col) order."""

    origins: np.ndarray
    dirs: np.ndarray
    depth: np.ndarray
    depth_mask: np.ndarray
    semantic: np.ndarray
    semantic_mask: np.ndarray
    normal: np.ndarray
    normal_mask: np.ndarray

    def __len__(self) -> int:
        return len(self.origins)

    def take(self, rows) -> "RayTable":
        return RayTable(*(getattr(self, f)[rows] for f in self.__dataclass_fields__))


def build_ray_table(rig: CameraRig, views, only_supervised: bool = True) -> RayTable:
    cams = {c.id: c for c in rig.by_id()}
    cols = {k: [] for k in RayTable.__dataclass_fields__}
    for vt in sorted(views, key=lambda v: v.camera_id):
        shp = vt.shape
        if shp is None:
            continue
        if vt.camera_id not in cams:
            raise DomainError(f"no camera with id {vt.camera_id}")
        h, w = shp
        cam = cams[vt.camera_id].with_resolution(w, h)
        o, d = camera_rays(cam)
        n = h * w
        z = np.zeros(n, bool)
        dm = z if vt.depth is None else np.asarray(vt.depth_mask, bool).reshape(-1)
        sm = z if vt.semantic is None else np.asarray(vt.semantic_mask, bool).reshape(-1)
        nm = z if vt.normal is None else np.asarray(vt.normal_mask, bool).reshape(-1)
        keep = (dm | sm | nm) if only_supervised else np.ones(n, bool)
        cols["origins"].append(o[keep])
        cols["dirs"].append(d[keep])
        cols["depth"].append((np.zeros(n) if vt.depth is None else np.asarray(vt.depth, float).reshape(-1))[keep])
        cols["depth_mask"].append(dm[keep])
        sem = np.zeros(n, np.int64) if vt.semantic is None else np.asarray(vt.semantic).reshape(-1).astype(np.int64)
        cols["semantic"].append(np.where(sm, sem, 0)[keep])
        cols["semantic_mask"].append(sm[keep])
        cols["normal"].append((np.zeros((n, 3)) if vt.normal is None else np.asarray(vt.normal, float).reshape(-1, 3))[keep])
        cols["normal_mask"].append(nm[keep])
    if not cols["origins"]:
        e = np.zeros(0)
        return RayTable(np.zeros((0, 3)), np.zeros((0, 3)), e, e.astype(bool), e.astype(np.int64), e.astype(bool),
                        np.zeros((0, 3)), e.astype(bool))
    return RayTable(*(np.concatenate(cols[k]) for k in RayTable.__dataclass_fields__))


# --- configuration ----------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    """Training settings shared by both modes.

    ``rays_per_iter`` caps the number of supervised rays rendered per
    iteration (seeded subsample; ``None`` renders all). ``density_threshold``
    decides occupancy from density when the FREE channel is untrained
    (``None`` = ln 2 / voxel size, i.e. 50% opacity across one voxel).
    """

    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimConfig = field(default_factory=OptimConfig)
    iterations: int = 500
    seed: int = 0
    supervision_mode: str = "3d+2d"
    rays_per_iter: Optional[int] = 4096
    log_every: int = 50
    mask_depth_by_opacity: bool = True
    init_raw_density: float = -4.0
    density_threshold: Optional[float] = None
    threads: int = 1

    def __post_init__(self):
        if self.supervision_mode not in MODES:
            raise DomainError(f"supervision_mode must be one of {MODES}")
        if self.iterations < 0:
            raise DomainError("iterations must be >= 0")
        if self.rays_per_iter is not None and self.rays_per_iter < 1:
            raise DomainError("rays_per_iter must be positive")
        if self.threads < 1:
            raise DomainError("threads must be >= 1")

    def to_json(self) -> dict:
        return {
            "sampler": self.sampler.to_json(),
            "loss_weights": self.loss_weights.to_json(),
            "optimizer": self.optimizer.to_json(),
            "iterations": self.iterations,
            "seed": self.seed,
            "supervision_mode": self.supervision_mode,
            "rays_per_iter": self.rays_per_iter,
            "log_every": self.log_every,
            "mask_depth_by_opacity": self.mask_depth_by_opacity,
            "init_raw_density": self.init_raw_density,
            "density_threshold": self.density_threshold,
            "threads": self.threads,
        }

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "sampler" in d:
            d["sampler"] = SamplerConfig.from_json(d["sampler"])
        if "loss_weights" in d:
            d["loss_weights"] = LossWeights(**d["loss_weights"])
        if "optimizer" in d:
            d["optimizer"] = OptimConfig(**d["optimizer"])
        return cls(**d)

    def threshold_for(self, spec: VoxelGridSpec) -> float:
        return math.log(2.0) / spec.voxel_size if self.density_threshold is None else self.density_threshold


# --- objective --------------------------------------------------------------

@dataclass
class FieldSet:
    """Fields in rendering space: density >= 0, C+1 semantic logits, unit normals."""

    density: np.ndarray
    sem: np.ndarray
    normals: Optional[np.ndarray] = None


@dataclass
class LossResult:
    value: float
    terms: dict
    grad_density: np.ndarray
    grad_sem: np.ndarray
    grad_normals: Optional[np.ndarray]
    rendered: Optional[dict] = None


def _uses(mode: str):
    return "3d" in mode, mode in ("3d+2d", "2d")


def total_loss(fields: FieldSet, spec: VoxelGridSpec, targets: TrainTargets, cfg: TrainConfig,
               table: Optional[RayTable] = None, rows=None, rng=None, num_classes: Optional[int] = None) -> LossResult:
    """Combined objective and its gradient with respect to the field values.

    L = CE3D + lambda_d*L_dep + lambda_s*CE2D + lambda_n*L_nrm + lambda_r*L_dist,
    with terms for absent targets omitted. ``rows`` picks a subset of the ray
    table (all rays when ``None``).
    """
    lw = cfg.loss_weights
    use3d, use2d = _uses(cfg.supervision_mode)
    use3d = use3d and targets.gt_occ is not None
    use2d = use2d and table is not None and len(table) > 0
    if not (use3d or use2d):
        raise DomainError("no supervision present for the selected mode")
    k = fields.sem.shape[-1]
    c = k - 1 if num_classes is None else num_classes
    terms = {}
    total = 0.0
    g_density = np.zeros_like(fields.density)
    g_sem = np.zeros_like(fields.sem)
    g_normals = None if fields.normals is None else np.zeros_like(fields.normals)
    rendered = None

    if use3d:
        if targets.gt_occ.spec != spec:
            raise DomainError("ground-truth occupancy grid differs from the field grid")
        tgt, mask = occupancy_targets(targets.gt_occ)
        v, g = loss_semantic(fields.sem, tgt, mask)
        terms["sem3d"] = v
        total += v
        g_sem += g

    if use2d:
        tb = table if rows is None else table.take(rows)
        probs = cfg.sampler.semantic_mode == "probabilities"
        sem_r = softmax(fields.sem, axis=-1) if probs else fields.sem
        parts = [sem_r.reshape(spec.n_voxels, k)]
        has_n = fields.normals is not None and tb.normal_mask.any()
        if has_n:
            parts.append(fields.normals.reshape(spec.n_voxels, 3))
        tau = fields.density.reshape(-1)
        feat = np.concatenate(parts, axis=1)
        samples = sample_rays(tb.origins, tb.dirs, spec, cfg.sampler, rng)
        nearest = cfg.sampler.interpolation == "nearest"
        args = (tau, feat, grid_tuple(spec), tb.origins, tb.dirs, samples.t, samples.delta, samples.n, samples.ms, k)
        depth, opacity, sem, extra, dist = kernels.render_forward(*args, nearest, threads=cfg.threads)
        r = len(tb)
        gd = np.zeros(r)
        gs = np.zeros((r, k))
        gx = np.zeros((r, extra.shape[1]))
        if tb.depth_mask.any():
            v, g = loss_depth(depth, opacity, tb.depth, tb.depth_mask, mask_by_opacity=cfg.mask_depth_by_opacity)
            terms["depth"] = v
            total += lw.lambda_d * v
            gd += lw.lambda_d * g
        if tb.semantic_mask.any():
            if np.any(tb.semantic[tb.semantic_mask] >= c):
                raise DomainError(f"2D semantic label outside 0..{c - 1}")
            fn = loss_semantic_probs if probs else loss_semantic
            v, g = fn(sem, tb.semantic, tb.semantic_mask)
            terms["sem2d"] = v
            total += lw.lambda_s * v
            gs += lw.lambda_s * g
        if has_n:
            nrm, _ = normalize_normals(extra)
            v, g = loss_normal(nrm, tb.normal, tb.normal_mask)
            terms["normal"] = v
            total += lw.lambda_n * v
            gx += normalize_backward(extra, lw.lambda_n * g)
        terms["distortion"] = float(dist.mean()) if r else 0.0
        total += lw.lambda_r * terms["distortion"]
        g_dist = np.full(r, lw.lambda_r / r) if r else np.zeros(0)
        gt, gf = kernels.render_backward(*args, gd, np.zeros(r), gs, gx, g_dist, nearest, threads=cfg.threads)
        g_density += gt.reshape(fields.density.shape)
        gsem_r = gf[:, :k].reshape(fields.sem.shape)
        if probs:
            gsem_r = sem_r * (gsem_r - np.sum(gsem_r * sem_r, axis=-1, keepdims=True))
        g_sem += gsem_r
        if has_n:
            g_normals += gf[:, k:].reshape(fields.normals.shape)
        rendered = {"depth": depth, "opacity": opacity, "sem": sem, "rays": tb}

    return LossResult(float(total), terms, g_density, g_sem, g_normals, rendered)


# --- decoding ---------------------------------------------------------------

def decode_fields(density: np.ndarray, sem: np.ndarray, spec: VoxelGridSpec, num_classes: int,
                  rule: str, threshold: float) -> SemanticOccupancy:
    """Occupancy from fields.

    ``rule="logits"``: argmax over the C+1 channels (FREE is the last one).
    ``rule="density"``: occupied where density > ``threshold``, class =
    argmax over the C semantic channels; FREE elsewhere.
    """
    if rule == "logits":
        lab = np.argmax(sem, axis=-1)
        lab = np.where(lab == num_classes, FREE, lab)
    elif rule == "density":
        lab = np.where(density > threshold, np.argmax(sem[..., :num_classes], axis=-1), FREE)
    else:
        raise DomainError(f"unknown decode rule {rule!r}")
    return SemanticOccupancy(spec, lab.astype(np.uint8), num_classes)


def decode_rule_for(mode: str) -> str:
    return "logits" if "3d" in mode else "density"


def occupancy_scores(pred: SemanticOccupancy, gt: SemanticOccupancy, mask=None) -> dict:
    m, per = miou(confusion(pred, gt, mask))
    return {"iou": geometry_iou(pred, gt, mask), "miou": m, "per_class_iou": per.tolist()}


# --- scene fitting ----------------------------------------------------------

@dataclass
class FitResult:
    density: ScalarField
    sem: VectorField
    normals: VectorField
    params: dict
    trace: list
    config: TrainConfig

    def occupancy(self, num_classes: int, rule: Optional[str] = None) -> SemanticOccupancy:
        rule = rule or decode_rule_for(self.config.supervision_mode)
        spec = self.density.spec
        return decode_fields(self.density.values, self.sem.values, spec, num_classes, rule,
                             self.config.threshold_for(spec))


def fields_from_params(params: dict) -> FieldSet:
    normals, _ = normalize_normals(params["normal"])
    return FieldSet(softplus(params["density"]), params["sem"], normals)


def init_fit_params(spec: VoxelGridSpec, num_classes: int, cfg: TrainConfig) -> dict:
    rng = substream(cfg.seed, "init")
    return {
        "density": np.full(spec.dims, float(cfg.init_raw_density)),
        "sem": np.zeros(tuple(spec.dims) + (num_classes + 1,)),
        "normal": rng.normal(size=tuple(spec.dims) + (3,)),
    }


def _ray_rows(n_rays: int, cfg: TrainConfig, rng: np.random.Generator):
    if cfg.rays_per_iter is None or cfg.rays_per_iter >= n_rays:
        return None
    return np.sort(rng.choice(n_rays, size=cfg.rays_per_iter, replace=False))


def fit_scene(targets: TrainTargets, rig: CameraRig, spec: VoxelGridSpec, num_classes: int,
              cfg: TrainConfig = TrainConfig(), observed=None, callback=None) -> FitResult:
    """Optimize per-voxel density, semantic logits and normals against the targets.

    Every ``log_every`` iterations (and at the end) the trace entry also holds
    occupancy IoU / mIoU against ``targets.gt_occ`` when given (restricted to
    ``observed`` voxels if a mask is passed).
    """
    use3d, use2d = _uses(cfg.supervision_mode)
    if not (use2d and targets.has_2d()) and not (use3d and targets.gt_occ is not None):
        raise DomainError("fit_scene needs at least one target for the selected supervision mode")
    table = build_ray_table(rig, targets.views) if use2d else None
    params = init_fit_params(spec, num_classes, cfg)
    state = OptimizerState(cfg.optimizer)
    ray_rng = substream(cfg.seed, "rays")
    samp_rng = substream(cfg.seed, "sampler")
    rule = decode_rule_for(cfg.supervision_mode)
    thr = cfg.threshold_for(spec)
    trace = []
    for it in range(cfg.iterations + 1):
        fs = fields_from_params(params)
        last = it == cfg.iterations
        rows = _ray_rows(len(table), cfg, ray_rng) if table is not None and not last else None
        res = total_loss(fs, spec, targets, cfg, table, rows, samp_rng, num_classes)
        if not np.isfinite(res.value):
            raise DivergenceError(it, "non-finite loss")
        entry = {"iter": it, "loss": res.value, **res.terms}
        if targets.gt_occ is not None and (last or it % max(cfg.log_every, 1) == 0):
            occ = decode_fields(fs.density, fs.sem, spec, num_classes, rule, thr)
            entry.update({k: v for k, v in occupancy_scores(occ, targets.gt_occ, observed).items() if k != "per_class_iou"})
        trace.append(entry)
        if it % max(cfg.log_every, 1) == 0 or last:
            log.info("fit iter %d loss %.6g", it, res.value)
        if callback is not None:
            callback(it, entry)
        if last:
            break
        grads = {
            "density": res.grad_density * sigmoid(params["density"]),
            "sem": res.grad_sem,
            "normal": normalize_backward(params["normal"], res.grad_normals)
            if res.grad_normals is not None else np.zeros_like(params["normal"]),
        }
        try:
            adam_step(params, grads, state)
        except FloatingPointError as e:
            raise DivergenceError(it, str(e)) from None
    fs = fields_from_params(params)
    return FitResult(
        ScalarField(spec, fs.density), VectorField(spec, fs.sem), VectorField(spec, fs.normals), params, trace, cfg
    )


# --- feed-forward training --------------------------------------------------

@dataclass
class Frame:
    """One training sample: per-camera feature maps plus its targets."""

    maps: list
    targets: TrainTargets


@dataclass
class FeedForwardResult:
    params: HeadParams
    trace: list
    config: TrainConfig


def _frame_cache(frames, rig, spec):
    return [lift_features(rig, f.maps, spec) for f in frames]


def predict_occupancy(volume: FeatureVolume, params: HeadParams, num_classes: int, cfg: TrainConfig) -> SemanticOccupancy:
    out = head_forward(volume, params, num_classes)
    return decode_fields(out.density.values, out.sem.values, volume.spec, num_classes,
                         decode_rule_for(cfg.supervision_mode), cfg.threshold_for(volume.spec))


def train_feedforward(frames: list, rig: CameraRig, spec: VoxelGridSpec, num_classes: int,
                      cfg: TrainConfig = TrainConfig(), use_conv: bool = False, init_scale: float = 0.1,
                      eval_frames: Optional[list] = None) -> FeedForwardResult:
    """Optimize head parameters through lift -> head -> render -> losses.

    Feature maps are fixed inputs, so each frame is lifted once. Gradients are
    averaged over all frames every iteration. The trace records the mean loss
    and, every ``log_every`` iterations, mIoU on ``eval_frames``.
    """
    if not frames:
        raise DomainError("need at least one training frame")
    use3d, use2d = _uses(cfg.supervision_mode)
    volumes = _frame_cache(frames, rig, spec)
    tables = [build_ray_table(rig, f.targets.views) if use2d else None for f in frames]
    channels = volumes[0].channels
    params = init_head(channels, num_classes, substream(cfg.seed, "init"), use_conv, init_scale, cfg.init_raw_density)
    pd = params.as_dict()
    state = OptimizerState(cfg.optimizer)
    ray_rng = substream(cfg.seed, "rays")
    samp_rng = substream(cfg.seed, "sampler")
    eval_vols = _frame_cache(eval_frames, rig, spec) if eval_frames else []
    trace = []
    nf = len(frames)
    for it in range(cfg.iterations + 1):
        hp = HeadParams.from_dict(pd)
        last = it == cfg.iterations
        grads = {k: np.zeros_like(v) for k, v in pd.items()}
        loss = 0.0
        for vol, fr, tb in zip(volumes, frames, tables):
            out = head_forward(vol, hp, num_classes)
            fs = FieldSet(out.density.values, out.sem.values, out.normals.values)
            rows = _ray_rows(len(tb), cfg, ray_rng) if tb is not None else None
            res = total_loss(fs, spec, fr.targets, cfg, tb, rows, samp_rng, num_classes)
            loss += res.value / nf
            if last:
                continue
            g, _ = head_backward(out.cache, res.grad_density / nf, res.grad_sem / nf,
                                 None if res.grad_normals is None else res.grad_normals / nf)
            for k in grads:
                grads[k] += g[k]
        if not np.isfinite(loss):
            raise DivergenceError(it, "non-finite loss")
        entry = {"iter": it, "loss": loss}
        if eval_vols and (last or it % max(cfg.log_every, 1) == 0):
            entry["eval_miou"] = evaluate_frames(eval_vols, eval_frames, hp, num_classes, cfg)
        trace.append(entry)
        if last:
            break
        try:
            adam_step(pd, grads, state)
        except FloatingPointError as e:
            raise DivergenceError(it, str(e)) from None
    return FeedForwardResult(HeadParams.from_dict(pd), trace, cfg)


def evaluate_frames(volumes, frames, params: HeadParams, num_classes: int, cfg: TrainConfig) -> float:
    """mIoU over the pooled confusion counts of several frames (IGNORE voxels excluded)."""
    tp = fp = fn = 0
    for vol, fr in zip(volumes, frames):
        pred = predict_occupancy(vol, params, num_classes, cfg)
        cc = confusion(pred, fr.targets.gt_occ)
        tp, fp, fn = tp + cc.tp, fp + cc.fp, fn + cc.fn
    from ..evaluate import ConfusionCounts

    return miou(ConfusionCounts(tp, fp, fn))[0]


def with_mode(cfg: TrainConfig, mode: str) -> TrainConfig:
    return replace(cfg, supervision_mode=mode)
