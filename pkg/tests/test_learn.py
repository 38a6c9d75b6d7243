import math

import numpy as np
import pytest
from scipy.signal import correlate
from scipy.special import logsumexp

from conftest import random_rig
from voxlift.errors import DomainError
from voxlift.experiments import make_frames, toy_setup
from voxlift.learn import (
    DivergenceError, FieldSet, HeadParams, LossWeights, OptimConfig, OptimizerState, TrainConfig, TrainTargets,
    ViewTargets, adam_step, fit_scene, head_backward, head_forward, init_head, loss_depth, loss_normal, loss_semantic,
    loss_semantic_probs, targets_from_scene, total_loss, train_feedforward,
)
from voxlift.learn.gradcheck import check_grad
from voxlift.learn.head import conv3, conv3_backward, softplus
from voxlift.learn.pipeline import build_ray_table, decode_fields, fields_from_params, substream
from voxlift.render import SamplerConfig
from voxlift.scenes import bundled_scene_path, default_scene, load_scene, rasterize_scene
from voxlift.voxel import FREE, IGNORE, FeatureVolume, SemanticOccupancy, VoxelGridSpec, decode_occupancy


# --- head -------------------------------------------------------------------

def _volume(rng, dims=(3, 3, 2), ch=4):
    spec = VoxelGridSpec((0, 0, 0), 1.0, dims)
    return FeatureVolume(spec, rng.normal(size=dims + (ch,)), np.ones(dims, np.int64))


def test_head_zero_params():
    vol = _volume(np.random.default_rng(0))
    hp = HeadParams(np.zeros((4, 8)), np.zeros(8))
    out = head_forward(vol, hp, 3)
    np.testing.assert_allclose(out.density.values, 0.693147, atol=1e-6)
    assert np.all(out.normals.values == 0)


def test_head_bias_selects_class():
    vol = _volume(np.random.default_rng(0))
    b = np.zeros(8)
    b[2] = 5.0
    out = head_forward(vol, HeadParams(np.zeros((4, 8)), b), 3)
    assert np.all(decode_occupancy(out.sem, 3).labels == 2)


def test_head_shape_errors(rng):
    vol = _volume(rng)
    with pytest.raises(DomainError):
        head_forward(vol, HeadParams(np.zeros((5, 8)), np.zeros(8)), 3)
    with pytest.raises(DomainError):
        head_forward(vol, HeadParams(np.zeros((4, 8)), np.zeros(8), np.zeros((3, 3, 3, 4, 2))), 3)


def test_conv3_matches_scipy(rng):
    x = rng.normal(size=(4, 3, 5, 2))
    k = rng.normal(size=(3, 3, 3, 2, 3))
    got = conv3(x, k)
    for o in range(3):
        ref = sum(correlate(x[..., i], k[..., i, o], mode="same") for i in range(2))
        np.testing.assert_allclose(got[..., o], ref, atol=1e-12)


@pytest.mark.parametrize("use_conv", [False, True])
def test_head_gradients_fd(rng, use_conv):
    vol = _volume(rng)
    hp = init_head(4, 3, rng, use_conv, scale=0.5, density_bias=0.0)
    hp.bias[5:8] = (2.0, -1.5, 1.0)  # keep raw normals away from zero norm, where h = 1e-3 is too coarse
    gd = rng.normal(size=vol.spec.dims)
    gs = rng.normal(size=vol.spec.dims + (4,))
    gn = rng.normal(size=vol.spec.dims + (3,))

    def f():
        o = head_forward(vol, hp, 3)
        return float(np.sum(gd * o.density.values) + np.sum(gs * o.sem.values) + np.sum(gn * o.normals.values))

    grads, gx = head_backward(head_forward(vol, hp, 3).cache, gd, gs, gn)
    for name, p in hp.as_dict().items():
        assert check_grad(f, p, grads[name], h=1e-3) < 1e-4, name
    assert check_grad(f, vol.values, gx, h=1e-3) < 1e-4


def test_conv3_backward_fd(rng):
    x = rng.normal(size=(3, 3, 3, 2))
    k = rng.normal(size=(3, 3, 3, 2, 2))
    g = rng.normal(size=(3, 3, 3, 2))
    gx, gk = conv3_backward(x, k, g)
    assert check_grad(lambda: float(np.sum(g * conv3(x, k))), x, gx) < 1e-6
    assert check_grad(lambda: float(np.sum(g * conv3(x, k))), k, gk) < 1e-6


# --- losses -----------------------------------------------------------------

def test_loss_depth_examples_and_oracle(rng):
    d = rng.uniform(1, 5, (4, 5))
    assert loss_depth(d, np.ones_like(d), d, np.ones_like(d, bool))[0] == 0
    m = np.zeros((1, 1), bool)
    m[0, 0] = True
    assert loss_depth([[2.0]], [[1.0]], [[3.0]], m)[0] == 1.0
    assert loss_depth([[2.0]], [[0.0]], [[3.0]], m)[0] == 0.0  # opacity-masked out
    tgt = rng.uniform(1, 5, (4, 5))
    op = rng.uniform(0, 0.01, (4, 5))
    mask = rng.uniform(size=(4, 5)) < 0.6
    total, n = 0.0, 0
    for i in range(4):
        for j in range(5):
            if mask[i, j] and op[i, j] > 1e-3:
                total += abs(d[i, j] - tgt[i, j])
                n += 1
    assert abs(loss_depth(d, op, tgt, mask)[0] - total / n) < 1e-10
    v, g = loss_depth(d, op, tgt, mask)
    assert check_grad(lambda: loss_depth(d, op, tgt, mask)[0], d, g) < 1e-6


def test_loss_semantic_examples_and_oracle(rng):
    lab = np.array([0, 3, 1])
    assert loss_semantic(np.eye(4)[lab] * 1e6, lab)[0] == pytest.approx(0, abs=1e-9)
    assert loss_semantic(np.zeros((3, 4)), lab)[0] == pytest.approx(1.386294, abs=1e-6)
    logits = rng.normal(size=(20, 5)) * 3
    labels = rng.integers(0, 5, 20)
    mask = rng.uniform(size=20) < 0.7
    ref = np.mean([logsumexp(logits[i]) - logits[i, labels[i]] for i in range(20) if mask[i]])
    v, g = loss_semantic(logits, labels, mask)
    assert abs(v - ref) < 1e-8
    assert check_grad(lambda: loss_semantic(logits, labels, mask)[0], logits, g) < 1e-6
    with pytest.raises(DomainError):
        loss_semantic(logits, np.full(20, 5))


def test_loss_semantic_probs_fd(rng):
    p = rng.uniform(0.05, 1, (10, 4))
    lab = rng.integers(0, 4, 10)
    v, g = loss_semantic_probs(p, lab)
    ref = np.mean([-math.log(p[i, lab[i]] / p[i].sum()) for i in range(10)])
    assert abs(v - ref) < 1e-12
    assert check_grad(lambda: loss_semantic_probs(p, lab)[0], p, g) < 1e-4


def test_loss_normal_examples_and_oracle(rng):
    n = rng.normal(size=(6, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    m = np.ones(6, bool)
    assert loss_normal(n, n, m)[0] == pytest.approx(0, abs=1e-15)
    assert loss_normal([[1.0, 0, 0]], [[0, 1.0, 0]], [True])[0] == 3.0
    q = rng.normal(size=(6, 3))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    ref = 0.0
    for i in range(6):
        ref += sum(abs(n[i, k] - q[i, k]) for k in range(3)) + abs(1 - sum(n[i, k] * q[i, k] for k in range(3)))
    v, g = loss_normal(n, q, m)
    assert abs(v - ref / 6) < 1e-10
    assert check_grad(lambda: loss_normal(n, q, m)[0], n, g) < 1e-6


# --- total loss -------------------------------------------------------------

def small_problem(rng, n_cams=2, dims=(4, 4, 4), image=8, C=3):
    spec = VoxelGridSpec((-1, -1, -1), 0.5, dims)
    rig = random_rig(rng, n_cams, width=image, height=image, radius=(3.5, 5.0), target_spread=0.2)
    views = []
    for cam in rig.by_id():
        shp = (image, image)
        n = rng.normal(size=shp + (3,))
        views.append(ViewTargets(cam.id, rng.uniform(2, 5, shp), rng.uniform(size=shp) < 0.7,
                                 rng.integers(0, C, shp), rng.uniform(size=shp) < 0.7,
                                 n / np.linalg.norm(n, axis=-1, keepdims=True), rng.uniform(size=shp) < 0.7))
    labels = rng.choice(list(range(C)) + [FREE, IGNORE], size=dims).astype(np.uint8)
    targets = TrainTargets(SemanticOccupancy(spec, labels, C), views)
    nrm = rng.normal(size=dims + (3,))
    fields = FieldSet(rng.uniform(0.2, 3.0, dims), rng.normal(size=dims + (C + 1,)),
                      nrm / np.linalg.norm(nrm, axis=-1, keepdims=True))
    return spec, rig, targets, fields


def _table(rig, targets):
    return build_ray_table(rig, targets.views)


def test_total_loss_3d_only(rng):
    spec, rig, targets, fields = small_problem(rng)
    cfg = TrainConfig(supervision_mode="3d")
    res = total_loss(fields, spec, targets, cfg, _table(rig, targets))
    from voxlift.learn.losses import occupancy_targets
    tgt, mask = occupancy_targets(targets.gt_occ)
    assert res.value == loss_semantic(fields.sem, tgt, mask)[0]
    assert set(res.terms) == {"sem3d"} and np.all(res.grad_density == 0)


def test_total_loss_weighted_sum(rng):
    spec, rig, targets, fields = small_problem(rng)
    res = total_loss(fields, spec, targets, TrainConfig(), _table(rig, targets), num_classes=3)
    t = res.terms
    expect = t["sem3d"] + 0.05 * (t["depth"] + t["sem2d"] + t["normal"]) + 0.005 * t["distortion"]
    assert res.value == pytest.approx(expect, rel=1e-14)
    assert res.value >= 0 and all(v >= 0 for v in t.values())


def test_total_loss_needs_targets(rng):
    spec, rig, targets, fields = small_problem(rng)
    with pytest.raises(DomainError):
        total_loss(fields, spec, TrainTargets(None, []), TrainConfig(), None)
    with pytest.raises(DomainError):
        total_loss(fields, spec, TrainTargets(None, targets.views), TrainConfig(supervision_mode="3d"), _table(rig, targets))


@pytest.mark.parametrize("sem_mode,interp", [("logits", "trilinear"), ("probabilities", "trilinear"), ("logits", "nearest")])
def test_total_loss_gradients_fd(rng, sem_mode, interp):
    spec, rig, targets, fields = small_problem(rng)
    lw = LossWeights(1.0, 1.0, 1.0, 1.0)
    cfg = TrainConfig(loss_weights=lw, sampler=SamplerConfig(step=0.2, semantic_mode=sem_mode, interpolation=interp))
    table = _table(rig, targets)
    res = total_loss(fields, spec, targets, cfg, table, num_classes=3)
    f = lambda: total_loss(fields, spec, targets, cfg, table, num_classes=3).value
    for name, x, g in (("density", fields.density, res.grad_density), ("sem", fields.sem, res.grad_sem),
                       ("normals", fields.normals, res.grad_normals)):
        # entries far below the gradient scale only measure O(h^2) truncation noise
        idx = np.nonzero(np.abs(g.reshape(-1)) > 1e-3 * np.abs(g).max())[0]
        idx = rng.choice(idx, min(40, len(idx)), replace=False)
        assert check_grad(f, x, g, h=1e-3, indices=idx) < 1e-4, name


def test_end_to_end_param_gradient(rng):
    """Through softplus density and normalized raw normals, as fit_scene does."""
    spec, rig, targets, fields = small_problem(rng)
    cfg = TrainConfig(loss_weights=LossWeights(1, 1, 1, 1), sampler=SamplerConfig(step=0.2))
    table = _table(rig, targets)
    params = {"density": rng.normal(size=spec.dims), "sem": fields.sem.copy(), "normal": rng.normal(size=spec.dims + (3,))}
    from voxlift.learn.head import sigmoid
    from voxlift.render import normalize_backward
    res = total_loss(fields_from_params(params), spec, targets, cfg, table, num_classes=3)
    gd = res.grad_density * sigmoid(params["density"])
    gn = normalize_backward(params["normal"], res.grad_normals)
    f = lambda: total_loss(fields_from_params(params), spec, targets, cfg, table, num_classes=3).value
    assert check_grad(f, params["density"], gd, h=1e-3) < 1e-4
    assert check_grad(f, params["normal"], gn, h=1e-3, indices=rng.choice(gn.size, 60, replace=False)) < 1e-4


# --- optimizer --------------------------------------------------------------

def test_adam_examples():
    p = {"x": np.array([1.0, -2.0])}
    adam_step(p, {"x": np.zeros(2)}, OptimizerState(OptimConfig(lr=0.1, weight_decay=0.0)))
    np.testing.assert_array_equal(p["x"], [1.0, -2.0])
    p = {"x": np.array([1.0, -2.0, 0.5])}
    adam_step(p, {"x": np.array([0.3, -5.0, 1e-3])}, OptimizerState(OptimConfig(lr=0.01, weight_decay=0.0)))
    np.testing.assert_allclose(p["x"] - [1.0, -2.0, 0.5], [-0.01, 0.01, -0.01], atol=1e-6)
    p = {"x": np.array([0.7])}
    adam_step(p, {"x": np.array([3.0])}, OptimizerState(OptimConfig(lr=0.0)))
    assert p["x"][0] == 0.7


def test_adam_quadratic_convergence():
    p = {"x": np.array([1.0])}
    st = OptimizerState(OptimConfig(lr=0.1, weight_decay=0.0))
    for _ in range(100):
        adam_step(p, {"x": 2 * p["x"]}, st)
    assert abs(p["x"][0]) < 0.05 and st.step == 100


def test_adam_decoupled_weight_decay():
    p = {"x": np.array([2.0])}
    adam_step(p, {"x": np.zeros(1)}, OptimizerState(OptimConfig(lr=0.1, weight_decay=0.5)))
    assert p["x"][0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def test_adam_non_finite_names_tensor():
    with pytest.raises(FloatingPointError, match="'b'"):
        adam_step({"a": np.zeros(1), "b": np.zeros(1)}, {"a": np.zeros(1), "b": np.array([np.nan])}, OptimizerState())


# --- configuration and targets ------------------------------------------------

def test_train_config_json_round_trip():
    cfg = TrainConfig(sampler=SamplerConfig(step=0.1, alpha=0.5), loss_weights=LossWeights(0.1, 0.2, 0.3, 0.0),
                      optimizer=OptimConfig(lr=0.05), iterations=7, seed=3, supervision_mode="2d")
    assert TrainConfig.from_json(cfg.to_json()) == cfg
    with pytest.raises(DomainError):
        TrainConfig(supervision_mode="4d")
    with pytest.raises(DomainError):
        LossWeights(-1.0)


def test_view_targets_validation():
    with pytest.raises(DomainError):
        ViewTargets(1, np.ones((2, 2)), np.ones((2, 3), bool))
    with pytest.raises(DomainError):
        ViewTargets(1, np.zeros((2, 2)), np.ones((2, 2), bool))
    with pytest.raises(DomainError):
        ViewTargets(1, np.ones((2, 2)), np.ones((2, 2), bool), np.zeros((3, 3)), np.ones((3, 3), bool))


def test_substreams_are_independent():
    a = substream(5, "init").normal(size=4)
    np.testing.assert_array_equal(a, substream(5, "init").normal(size=4))
    assert not np.allclose(a, substream(5, "rays").normal(size=4))
    assert not np.allclose(a, substream(6, "init").normal(size=4))


def test_lidar_targets_are_ray_distances():
    sc = default_scene(n_cameras=2, dims=(16, 16, 16), voxel_size=0.5, width=32)
    dense = targets_from_scene(sc, kinds=("depth",), with_occ=False)
    sparse = targets_from_scene(sc, kinds=("depth", "semantic"), source="lidar", with_occ=False)
    for dv, sv in zip(dense.views, sparse.views):
        m = sv.depth_mask & dv.depth_mask
        assert m.sum() > 20
        # hits sit off pixel centers, so grazing surfaces differ by up to a pixel's footprint
        rel = np.abs(sv.depth[m] - dv.depth[m]) / dv.depth[m]
        assert np.median(rel) < 0.05
        assert sv.normal is None
    with pytest.raises(DomainError):
        targets_from_scene(sc, source="radar")


def test_decode_density_rule():
    spec = VoxelGridSpec((0, 0, 0), 0.5, (1, 1, 2))
    sem = np.zeros((1, 1, 2, 4))
    sem[..., 1] = 1.0
    sem[..., 3] = 9.0  # FREE channel ignored by the density rule
    occ = decode_fields(np.array([[[2.0, 1.0]]]), sem, spec, 3, "density", math.log(2) / 0.5)
    np.testing.assert_array_equal(occ.labels.ravel(), [1, FREE])
    assert np.all(decode_fields(np.zeros((1, 1, 2)), sem, spec, 3, "logits", 0).labels == FREE)
    with pytest.raises(DomainError):
        decode_fields(np.zeros((1, 1, 2)), sem, spec, 3, "mode", 0)


# --- scene fitting ----------------------------------------------------------

@pytest.fixture(scope="module")
def slab_fit():
    sc = load_scene(bundled_scene_path("slab"))
    targets = targets_from_scene(sc, kinds=("depth",))
    cfg = TrainConfig(iterations=500, supervision_mode="2d", optimizer=OptimConfig(lr=0.1, weight_decay=0.0))
    return sc, targets, fit_scene(targets, sc.rig, sc.spec, sc.num_classes, cfg)


def test_fit_slab_depth_mae(slab_fit):
    sc, targets, res = slab_fit
    assert res.trace[-1]["depth"] < sc.spec.voxel_size
    assert len(res.trace) == 501 and "iou" in res.trace[-1]


def test_fit_slab_loss_window_non_increasing(slab_fit):
    _, _, res = slab_fit
    loss = np.array([e["loss"] for e in res.trace])
    means = loss[: 500].reshape(10, 50).mean(axis=1)
    assert np.all(np.diff(means) <= 0)


def test_semantic_supervision_beats_density_only():
    sc = default_scene(n_cameras=4, dims=(16, 16, 16), voxel_size=0.5, width=32)
    gt, _ = rasterize_scene(sc)
    acc = {}
    for kinds in (("depth",), ("depth", "semantic")):
        cfg = TrainConfig(iterations=200, supervision_mode="2d", rays_per_iter=2048,
                          optimizer=OptimConfig(lr=0.1, weight_decay=0.0))
        pred = fit_scene(targets_from_scene(sc, kinds=kinds), sc.rig, sc.spec, 4, cfg).occupancy(4)
        both = (gt.labels != FREE) & (pred.labels != FREE)
        acc[kinds] = np.mean(pred.labels[both] == gt.labels[both])
    assert acc[("depth", "semantic")] > acc[("depth",)]


def test_3d_ce_recovers_labels_exactly():
    sc = default_scene(n_cameras=4, dims=(16, 16, 16), voxel_size=0.5, width=32)
    targets = targets_from_scene(sc, kinds=(), observed_only=True)
    cfg = TrainConfig(iterations=60, supervision_mode="3d", loss_weights=LossWeights(0, 0, 0, 0),
                      optimizer=OptimConfig(lr=0.1, weight_decay=0.0))
    res = fit_scene(targets, sc.rig, sc.spec, 4, cfg)
    pred = res.occupancy(4).labels
    keep = targets.gt_occ.labels != IGNORE
    assert keep.sum() > 0 and (~keep).sum() > 0
    np.testing.assert_array_equal(pred[keep], targets.gt_occ.labels[keep])


def test_fit_divergence_reports_iteration():
    sc = load_scene(bundled_scene_path("slab"))
    targets = targets_from_scene(sc, kinds=("depth",), with_occ=False)
    v = targets.views[0]
    v.depth[v.depth_mask] = np.nan  # NaN labels slip past the positivity check
    with pytest.raises(DivergenceError) as e:
        fit_scene(targets, sc.rig, sc.spec, 1, TrainConfig(iterations=3, supervision_mode="2d", mask_depth_by_opacity=False))
    assert e.value.iteration == 0


def test_fit_requires_matching_targets():
    sc = load_scene(bundled_scene_path("slab"))
    targets = targets_from_scene(sc, kinds=("depth",), with_occ=False)
    with pytest.raises(DomainError):
        fit_scene(targets, sc.rig, sc.spec, 1, TrainConfig(iterations=1, supervision_mode="3d"))


# --- feed-forward -------------------------------------------------------------

@pytest.fixture(scope="module")
def toy():
    spec, rig = toy_setup(image=24, dims=(8, 8, 8), voxel_size=1.0)
    return spec, rig, make_frames(0, 1, spec, rig)


def test_feedforward_overfits_single_frame(toy):
    spec, rig, frames = toy
    cfg = TrainConfig(iterations=150, supervision_mode="3d", optimizer=OptimConfig(lr=0.05, weight_decay=0.0))
    res = train_feedforward(frames, rig, spec, 4, cfg, use_conv=True, eval_frames=frames)
    assert res.trace[-1]["eval_miou"] > 0.95
    assert res.trace[-1]["loss"] < 0.1 * res.trace[0]["loss"]


def test_feedforward_3d2d_runs_and_decreases(toy):
    spec, rig, frames = toy
    cfg = TrainConfig(iterations=30, supervision_mode="3d+2d", rays_per_iter=512,
                      optimizer=OptimConfig(lr=0.05, weight_decay=0.0))
    res = train_feedforward(frames, rig, spec, 4, cfg)
    assert res.trace[-1]["loss"] < res.trace[0]["loss"]


def test_zero_features_stay_at_uniform_baseline(toy):
    spec, rig, frames = toy
    from voxlift.learn.pipeline import Frame
    from voxlift.lift import FeatureMap
    zero = [Frame([FeatureMap(m.camera_id, np.zeros_like(m.values), m.stride) for m in frames[0].maps], frames[0].targets)]
    cfg = TrainConfig(iterations=300, supervision_mode="3d", optimizer=OptimConfig(lr=0.05, weight_decay=0.0))
    res = train_feedforward(zero, rig, spec, 4, cfg)
    lab = frames[0].targets.gt_occ.labels
    lab = lab[lab != IGNORE]
    freq = np.array([np.mean(np.where(lab == FREE, 4, lab) == k) for k in range(5)])
    entropy = -np.sum(freq[freq > 0] * np.log(freq[freq > 0]))
    # constant predictions cannot beat the entropy of the label marginal
    assert res.trace[-1]["loss"] >= entropy - 1e-9
    assert res.trace[-1]["loss"] == pytest.approx(entropy, abs=1e-2)
    w = res.params.weight
    assert np.all(w == w)  # finite
    from voxlift.lift import lift_features
    out = head_forward(lift_features(rig, zero[0].maps, spec), res.params, 4)
    assert np.ptp(out.sem.values.reshape(-1, 5), axis=0).max() == 0


def test_feedforward_needs_frames(toy):
    spec, rig, _ = toy
    with pytest.raises(DomainError):
        train_feedforward([], rig, spec, 4)
