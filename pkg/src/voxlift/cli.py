"""Command-line interface: ``voxlift <command> [options]``.

Every command prints one JSON report (or a CSV header plus row with
``--format csv``) on stdout, writes the same report to ``<out>/report.json``
when ``--out`` is given, and prints a one-line summary on stderr. Failures
print a single JSON line ``{"error": ..., "message": ...}`` on stderr and exit
non-zero (2 for invalid input, 1 otherwise).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import fields as dc_fields
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DomainError

log = logging.getLogger("voxlift")

FIT_DEFAULTS = {
    "iterations": 2000,
    "supervision_mode": "2d",
    "optimizer": {"lr": 0.1, "weight_decay": 0.0},
}
TRAIN_DEFAULTS = {
    "iterations": 200,
    "rays_per_iter": 1024,
    "optimizer": {"lr": 0.01},
}
SCHEMA_PATH = Path(__file__).parent / "data" / "schemas.json"


def load_schemas() -> dict:
    return json.loads(SCHEMA_PATH.read_text())


# --- config helpers ---------------------------------------------------------

def _read_json(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise DomainError(f"config not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise DomainError(f"invalid JSON in {p}: {e}") from None


def _resolve_scene(ref, base: Path = Path(".")):
    from .scenes import bundled_scene_path, load_scene, scene_from_json

    if ref is None:
        ref = "demo"
    if isinstance(ref, dict):
        return scene_from_json(ref)
    p = Path(ref)
    if not p.is_absolute() and (base / p).exists():
        p = base / p
    if p.exists():
        return load_scene(p)
    return load_scene(bundled_scene_path(str(ref)))


def _merge(defaults: dict, doc: dict) -> dict:
    out = json.loads(json.dumps(defaults))
    for k, v in doc.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k].update(v)
        else:
            out[k] = v
    return out


def _train_config(doc: dict, defaults: dict, args):
    """Split an experiment document into a TrainConfig and the remaining keys."""
    from .learn.pipeline import TrainConfig

    doc = _merge(defaults, doc)
    keys = {f.name for f in dc_fields(TrainConfig)}
    tc = {k: v for k, v in doc.items() if k in keys}
    rest = {k: v for k, v in doc.items() if k not in keys}
    try:
        cfg = TrainConfig.from_json(tc)
    except TypeError as e:
        raise DomainError(f"bad training config: {e}") from None
    if args.seed is not None:
        cfg = replace(cfg, seed=int(args.seed))
    cfg = replace(cfg, threads=int(args.threads))
    return cfg, rest


def _experiment(args, defaults):
    doc = _read_json(args.config) if args.config else {}
    base = Path(args.config).parent if args.config else Path(".")
    cfg, rest = _train_config(doc, defaults, args)
    scene_ref = args.scene if getattr(args, "scene", None) else rest.pop("scene", None)
    rest.pop("scene", None)
    return cfg, rest, scene_ref, base


def _out_dir(args):
    if not args.out:
        return None
    p = Path(args.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


# --- commands ---------------------------------------------------------------

def cmd_gen_scene(args) -> dict:
    from .scenes import observed_mask, rasterize_scene, render_gt_labels, save_scene
    from .export import colorize_classes, colorize_normals, write_pfm, write_ppm
    from .geometry import save_rig
    from .voxel import save_field, save_occupancy

    doc = _read_json(args.config) if args.config else None
    scene = _resolve_scene(doc if doc is not None else args.scene)
    if args.seed is not None:
        scene = replace(scene, seed=int(args.seed))
    occ, density = rasterize_scene(scene)
    seen = observed_mask(occ, scene.rig)
    files = []
    out = _out_dir(args)
    if out:
        save_scene(scene, out / "scene.json")
        save_rig(scene.rig, out / "rig.json")
        save_occupancy(out / "gt_occupancy", occ)
        save_field(out / "gt_density", density)
        files += ["scene.json", "rig.json", "gt_occupancy.json", "gt_density.json"]
        for cam in scene.rig.by_id():
            gt = render_gt_labels(scene, cam)
            stem = f"cam{cam.id}"
            write_pfm(out / f"{stem}_depth.pfm", gt.depth)
            write_ppm(out / f"{stem}_semantic.ppm", colorize_classes(gt.semantic))
            write_ppm(out / f"{stem}_normal.ppm", colorize_normals(gt.normal))
            files += [f"{stem}_depth.pfm", f"{stem}_semantic.ppm", f"{stem}_normal.ppm"]
    return {
        "command": "gen-scene",
        "num_classes": scene.num_classes,
        "dims": list(scene.spec.dims),
        "voxel_size": scene.spec.voxel_size,
        "n_cameras": len(scene.rig),
        "occupied_voxels": int(occ.occupied.sum()),
        "observed_voxels": int(seen.sum()),
        "files": files,
    }


def cmd_lift(args) -> dict:
    from .experiments import class_embeddings, class_feature_maps
    from .learn.pipeline import substream
    from .lift import lift_features, load_feature_map
    from .voxel import write_tensor

    doc = _read_json(args.config) if args.config else None
    scene = _resolve_scene(doc if doc is not None else args.scene)
    seed = scene.seed if args.seed is None else int(args.seed)
    if args.maps:
        stems = sorted(p.with_suffix("") for p in Path(args.maps).glob("*.json"))
        maps = [load_feature_map(s) for s in stems]
    else:
        emb = class_embeddings(scene.num_classes, args.channels, substream(seed, "embedding"))
        maps = class_feature_maps(scene, scene.rig, emb, args.stride, substream(seed, "features"), args.noise)
    vol = lift_features(scene.rig, maps, scene.spec, divide_by=args.divide_by)
    files = []
    out = _out_dir(args)
    if out:
        write_tensor(out / "features", vol.values, "f64", min_corner=list(scene.spec.min_corner),
                     voxel_size=scene.spec.voxel_size, kind="vector")
        write_tensor(out / "valid_count", vol.valid_count.astype(np.uint8), "u8")
        files += ["features.json", "valid_count.json"]
    vc = vol.valid_count
    return {
        "command": "lift",
        "channels": int(vol.channels),
        "n_cameras": len(scene.rig),
        "voxels": int(vc.size),
        "valid_voxels": int((vc > 0).sum()),
        "mean_valid_count": float(vc.mean()),
        "files": files,
    }


def _fit_report(res, scene, targets, obs, cfg) -> dict:
    from .experiments import depth_mae
    from .learn.pipeline import occupancy_scores

    pred = res.occupancy(scene.num_classes)
    sc = occupancy_scores(pred, targets.gt_occ, obs)
    final = res.trace[-1]
    fin = lambda x: None if x is None or not np.isfinite(x) else float(x)
    return {
        "command": "fit",
        "iterations": cfg.iterations,
        "seed": cfg.seed,
        "supervision_mode": cfg.supervision_mode,
        "final_loss": final["loss"],
        "terms": {k: v for k, v in final.items() if k not in ("iter", "loss", "iou", "miou")},
        "depth_mae": depth_mae(res.density, scene, scene.rig, cfg.sampler, cfg.threads),
        "iou": fin(sc["iou"]),
        "miou": fin(sc["miou"]),
        "per_class_iou": [fin(x) for x in sc["per_class_iou"]],
    }


def _write_trace(path: Path, trace: list) -> None:
    keys = []
    for e in trace:
        for k in e:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        for e in trace:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in e.items()})


def cmd_fit(args) -> dict:
    from .learn.pipeline import fit_scene, targets_from_scene
    from .scenes import observed_mask
    from .voxel import save_field, save_occupancy, write_tensor

    cfg, rest, scene_ref, base = _experiment(args, FIT_DEFAULTS)
    if args.iterations is not None:
        cfg = replace(cfg, iterations=int(args.iterations))
    scene = _resolve_scene(scene_ref, base)
    kinds = tuple(rest.get("kinds", ("depth", "semantic", "normal")))
    targets = targets_from_scene(scene, kinds=kinds, source=rest.get("labels", "dense"))
    obs = observed_mask(targets.gt_occ, scene.rig)
    res = fit_scene(targets, scene.rig, scene.spec, scene.num_classes, cfg, observed=obs)
    report = _fit_report(res, scene, targets, obs, cfg)
    files = []
    out = _out_dir(args)
    if out:
        save_field(out / "density", res.density)
        save_field(out / "sem", res.sem)
        save_field(out / "normals", res.normals)
        for k, v in res.params.items():
            write_tensor(out / f"param_{k}", v, "f64")
        save_occupancy(out / "occupancy", res.occupancy(scene.num_classes))
        _write_trace(out / "trace.csv", res.trace)
        (out / "config.json").write_text(json.dumps(cfg.to_json(), indent=2, sort_keys=True) + "\n")
        files = ["density.json", "sem.json", "normals.json", "occupancy.json", "trace.csv", "config.json"]
        files += [f"param_{k}.json" for k in res.params]
    report["files"] = files
    return report


def cmd_train(args) -> dict:
    from .experiments import make_frames, toy_setup
    from .learn.pipeline import evaluate_frames, train_feedforward
    from .lift import lift_features
    from .voxel import write_tensor

    cfg, rest, _, _ = _experiment(args, TRAIN_DEFAULTS)
    if args.iterations is not None:
        cfg = replace(cfg, iterations=int(args.iterations))
    n_train = int(rest.get("n_train", 8))
    n_eval = int(rest.get("n_eval", 2))
    if n_train < 1:
        raise DomainError("need at least one training frame")
    spec, rig = toy_setup(**{k: rest[k] for k in ("image", "voxel_size") if k in rest})
    frames = make_frames(cfg.seed, n_train + n_eval, spec, rig, channels=int(rest.get("channels", 8)),
                         stride=int(rest.get("stride", 2)), noise=float(rest.get("noise", 0.5)))
    train, held = frames[:n_train], frames[n_train:]
    res = train_feedforward(train, rig, spec, 4, cfg, use_conv=bool(rest.get("use_conv", False)), eval_frames=held)
    vols = [lift_features(rig, f.maps, spec) for f in train]
    train_miou = evaluate_frames(vols, train, res.params, 4, cfg)
    fin = lambda x: None if x is None or not np.isfinite(x) else float(x)
    files = []
    out = _out_dir(args)
    if out:
        for k, v in res.params.as_dict().items():
            write_tensor(out / f"head_{k}", v, "f64")
            files.append(f"head_{k}.json")
        _write_trace(out / "trace.csv", res.trace)
        files.append("trace.csv")
    return {
        "command": "train",
        "iterations": cfg.iterations,
        "seed": cfg.seed,
        "supervision_mode": cfg.supervision_mode,
        "final_loss": res.trace[-1]["loss"],
        "heldout_miou": fin(res.trace[-1].get("eval_miou")),
        "train_miou": fin(train_miou),
        "files": files,
    }


def cmd_render(args) -> dict:
    from .export import export_maps
    from .render import SamplerConfig, render_view
    from .scenes import rasterize_scene
    from .voxel import load_field

    doc = _read_json(args.config) if args.config else {}
    scene = _resolve_scene(doc.get("scene", args.scene) if doc else args.scene)
    sampler = SamplerConfig.from_json(doc.get("sampler", {})) if doc else SamplerConfig()
    if args.step_factor is not None:
        sampler = sampler.with_step_factor(args.step_factor, scene.spec)
    if args.fields:
        fd = Path(args.fields)
        density = load_field(fd / "density")
        sem = load_field(fd / "sem") if (fd / "sem.json").exists() else None
        normals = load_field(fd / "normals") if (fd / "normals.json").exists() else None
        source = "fields"
    else:
        _, density = rasterize_scene(scene)
        sem, normals, source = None, None, "gt"
    res = tuple(args.resolution) if args.resolution else None
    out = _out_dir(args)
    cams, files = [], []
    for cam in scene.rig.by_id():
        rm = render_view(cam, density, sem, normals, sampler, res, threads=args.threads)
        cov = rm.opacity > 0.5
        cams.append({"id": cam.id, "coverage": float(cov.mean()),
                     "mean_depth": float(rm.depth[cov].mean()) if cov.any() else 0.0})
        if out:
            files += export_maps(out, f"cam{cam.id}", rm, scene.num_classes)
    return {"command": "render", "source": source, "cameras": cams, "files": files}


def cmd_eval(args) -> dict:
    from .evaluate import EvalConfig, evaluate
    from .scenes import observed_mask, rasterize_scene
    from .voxel import load_occupancy

    pred = load_occupancy(args.pred)
    if args.gt:
        gt = load_occupancy(args.gt)
        scene = None
    else:
        scene = _resolve_scene(args.scene)
        gt, _ = rasterize_scene(scene)
    mask = None
    if args.observed:
        if scene is None:
            raise DomainError("--observed needs --scene to know the cameras")
        mask = observed_mask(gt, scene.rig)
    rep = evaluate(pred, gt, EvalConfig(args.delta), mask)
    return {"command": "eval", **rep}


def cmd_macs(args) -> dict:
    from .lift import estimate_lift_macs
    from .voxel import VoxelGridSpec

    if any(d < 1 for d in args.dims) or args.cameras < 1 or args.channels < 1 or args.n_keys < 1:
        raise DomainError("dims, cameras, channels and n_keys must be positive")
    spec = VoxelGridSpec((0.0, 0.0, 0.0), 1.0, tuple(args.dims))
    rep = estimate_lift_macs(spec, args.cameras, args.channels, args.n_keys)
    return {
        "command": "macs",
        "dims": list(args.dims),
        "n_cameras": args.cameras,
        "channels": args.channels,
        "n_keys": args.n_keys,
        **rep.to_json(),
    }


def _write_rows(path: Path, rows: list) -> None:
    keys = []
    for r in rows:
        for k in r:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def cmd_ablate(args) -> dict:
    from .experiments import SUPERVISION_MODES, STEP_FACTORS, ablate_step, ablate_supervision
    from .plots import bar_chart, line_chart

    out = _out_dir(args)
    rows = []
    csv_path = out / f"ablate_{args.kind}.csv" if out else None

    def on_row(row):
        rows.append(row)
        if csv_path:
            _write_rows(csv_path, rows)

    complete = False
    error = None
    if args.kind == "step-size":
        cfg, rest, scene_ref, base = _experiment(args, _merge(FIT_DEFAULTS, {"iterations": 500}))
        if args.iterations is not None:
            cfg = replace(cfg, iterations=int(args.iterations))
        factors = rest.get("factors", list(STEP_FACTORS))
        if not factors:
            raise DomainError("empty run list")
        scene = _resolve_scene(scene_ref, base)
        try:
            ablate_step(scene, cfg, factors, on_row=on_row)
            complete = True
        except Exception as e:  # keep the partial table
            error = e
        xs = [r["step_factor"] for r in rows]
        ys = [r["heldout_depth_mae"] for r in rows]
        svg = line_chart(xs, ys, "Step-size ablation", "step / voxel size", "held-out depth MAE (m)") if rows else None
    else:
        cfg, rest, _, _ = _experiment(args, TRAIN_DEFAULTS)
        if args.iterations is not None:
            cfg = replace(cfg, iterations=int(args.iterations))
        seeds = rest.get("seeds", [0, 1, 2])
        modes = rest.get("modes", list(SUPERVISION_MODES))
        if not seeds or not modes:
            raise DomainError("empty run list")
        try:
            ablate_supervision(cfg, seeds, modes, int(rest.get("n_train", 8)), int(rest.get("n_eval", 2)),
                               bool(rest.get("use_conv", False)), on_row=on_row,
                               channels=int(rest.get("channels", 8)), stride=int(rest.get("stride", 2)),
                               noise=float(rest.get("noise", 0.5)),
                               **{k: rest[k] for k in ("image", "voxel_size") if k in rest})
            complete = True
        except Exception as e:
            error = e
        means = [float(np.mean([r["heldout_miou"] for r in rows if r["mode"] == m])) for m in modes
                 if any(r["mode"] == m for r in rows)]
        svg = bar_chart(modes[: len(means)], means, "Supervision ablation", "supervision", "held-out mIoU") if rows else None
    files = []
    if out:
        files.append(csv_path.name)
        if svg:
            (out / f"ablate_{args.kind}.svg").write_text(svg)
            files.append(f"ablate_{args.kind}.svg")
    if error is not None:
        raise error
    return {"command": "ablate", "kind": args.kind, "rows": rows, "complete": complete, "files": files}


COMMANDS = {
    "gen-scene": cmd_gen_scene,
    "lift": cmd_lift,
    "fit": cmd_fit,
    "train": cmd_train,
    "render": cmd_render,
    "eval": cmd_eval,
    "macs": cmd_macs,
    "ablate": cmd_ablate,
}


# --- argument parsing and output ---------------------------------------------

class _Parser(argparse.ArgumentParser):
    """Usage errors become the same single-line JSON error as runtime failures."""

    def error(self, message):
        sys.stderr.write(json.dumps({"error": "UsageError", "message": message}) + "\n")
        sys.exit(2)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--threads", type=int, default=1, help="worker cap for render kernels (1 = reference)")
    common.add_argument("--format", choices=("json", "csv"), default="json", help="stdout format")

    p = _Parser(prog="voxlift", description="Differentiable voxel occupancy toolkit")
    p.add_argument("--version", action="version", version=f"voxlift {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-scene", parents=[common], help="rasterize a scene and write GT labels")
    s.add_argument("--scene", default="demo", help="bundled scene name or scene JSON path")

    s = sub.add_parser("lift", parents=[common], help="lift per-camera feature maps into a voxel volume")
    s.add_argument("--scene", default="demo")
    s.add_argument("--maps", help="directory of feature-map tensors (default: synthetic class features)")
    s.add_argument("--channels", type=int, default=8)
    s.add_argument("--stride", type=int, default=2)
    s.add_argument("--noise", type=float, default=0.5)
    s.add_argument("--divide-by", choices=("valid", "n_cameras"), default="valid")

    s = sub.add_parser("fit", parents=[common], help="fit per-voxel fields to 2D labels of a scene")
    s.add_argument("--scene", help="bundled scene name or path (overrides the config)")
    s.add_argument("--iterations", type=int)

    s = sub.add_parser("train", parents=[common], help="toy feed-forward head training")
    s.add_argument("--iterations", type=int)

    s = sub.add_parser("render", parents=[common], help="render depth/semantics/normals per camera")
    s.add_argument("--scene", default="demo")
    s.add_argument("--fields", help="directory written by `fit` (default: GT density)")
    s.add_argument("--resolution", type=int, nargs=2, metavar=("W", "H"))
    s.add_argument("--step-factor", type=float)

    s = sub.add_parser("eval", parents=[common], help="mIoU and precision/recall/F-score")
    s.add_argument("--pred", required=True, help="predicted occupancy tensor stem")
    s.add_argument("--gt", help="ground-truth occupancy tensor stem (default: rasterized --scene)")
    s.add_argument("--scene", default="demo")
    s.add_argument("--delta", type=float, help="match distance in meters (default: voxel size)")
    s.add_argument("--observed", action="store_true", help="restrict to voxels seen by the scene cameras")

    s = sub.add_parser("macs", parents=[common], help="analytic MAC counts for lifting vs attention")
    s.add_argument("--dims", type=int, nargs=3, default=[200, 200, 16], metavar=("H", "W", "Z"))
    s.add_argument("--cameras", type=int, default=6)
    s.add_argument("--channels", type=int, default=256)
    s.add_argument("--n-keys", type=int, default=8)

    s = sub.add_parser("ablate", parents=[common], help="step-size or supervision ablation")
    s.add_argument("kind", choices=("step-size", "supervision"))
    s.add_argument("--scene", help="scene for the step-size ablation")
    s.add_argument("--iterations", type=int)
    return p


def _flatten(report: dict) -> dict:
    flat = {}
    for k, v in report.items():
        if isinstance(v, dict):
            for k2, v2 in v.items():
                flat[f"{k}.{k2}"] = v2
        elif isinstance(v, list) and all(not isinstance(x, (dict, list)) for x in v):
            flat[k] = ";".join("" if x is None else str(x) for x in v)
        elif not isinstance(v, list):
            flat[k] = v
    return flat


def format_report(report: dict, fmt: str) -> str:
    if fmt == "json":
        return json.dumps(report, sort_keys=True)
    if report.get("command") == "ablate":
        rows = report["rows"]
    else:
        rows = [_flatten(report)]
    buf = io.StringIO()
    keys = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue().rstrip("\n")


def _summary(report: dict) -> str:
    skip = {"command", "files", "rows", "cameras", "per_class_iou", "terms"}
    parts = [f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in report.items() if k not in skip]
    return f"{report['command']}: " + " ".join(parts)


def _setup_logging():
    level = os.environ.get("VOXLIFT_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.threads < 1:
            raise DomainError("--threads must be >= 1")
        report = COMMANDS[args.command](args)
    except Exception as e:
        code = 2 if isinstance(e, (DomainError, FileNotFoundError)) else 1
        sys.stderr.write(json.dumps({"error": type(e).__name__, "message": str(e).replace("\n", " ")}) + "\n")
        log.debug("traceback", exc_info=True)
        return code
    if args.out:
        Path(args.out, "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    sys.stdout.write(format_report(report, args.format) + "\n")
    sys.stderr.write(_summary(report) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
