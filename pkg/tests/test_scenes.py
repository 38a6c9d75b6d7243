import json

import numpy as np
import pytest

from voxlift.errors import DomainError
from voxlift.geometry import Camera, CameraRig, Intrinsics, camera_rays, look_at, project_point, ring_rig
from voxlift.render import SamplerConfig, render_view
from voxlift.scenes import (
    Box, GroundPlane, LidarHits, SceneConfig, Sphere, bundled_scene_path, default_scene, first_hit, load_scene,
    observed_mask, project_labels, rasterize_scene, render_gt_labels, save_scene, simulate_lidar, zdepth_to_distance,
)
from voxlift.voxel import FREE, VoxelGridSpec, voxel_centers

SPEC = VoxelGridSpec((-4, -4, -1), 0.5, (16, 16, 8))


def _scene(prims, num_classes=3, rig=None, spec=SPEC):
    rig = rig or ring_rig(2, radius=8, height=3, width=8, height_px=8)
    return SceneConfig(prims, rig, spec, num_classes)


def contains_oracle(prim, p):
    x, y, z = p
    if isinstance(prim, Sphere):
        cx, cy, cz = prim.center
        return (x - cx) ** 2 + (y - cy) ** 2 + (z - cz) ** 2 <= prim.radius ** 2
    if isinstance(prim, Box):
        return all(abs(p[k] - prim.center[k]) <= prim.size[k] / 2 for k in range(3))
    return z <= prim.height


def random_primitives(rng, n=4, num_classes=3):
    prims = [GroundPlane(float(rng.uniform(-0.8, 0.0)), int(rng.integers(num_classes)))]
    for _ in range(n):
        c = tuple(rng.uniform(-2.5, 2.5, 2)) + (float(rng.uniform(0, 1.5)),)
        if rng.uniform() < 0.5:
            prims.append(Sphere(c, float(rng.uniform(0.3, 1.2)), int(rng.integers(num_classes))))
        else:
            prims.append(Box(c, tuple(rng.uniform(0.4, 2.0, 3)), int(rng.integers(num_classes))))
    return prims


def test_box_covering_eight_voxels():
    sc = _scene([Box((0.0, 0.0, 1.0), (1.0, 1.0, 1.0), 1)])
    occ, dens = rasterize_scene(sc)
    assert np.sum(occ.labels != FREE) == 8 and np.sum(occ.labels == 1) == 8
    assert np.all(dens.values[occ.labels == 1] == 50.0) and np.all(dens.values[occ.labels == FREE] == 0)


def test_later_primitive_overrides():
    sc = _scene([Box((0, 0, 1), (3, 3, 2), 1), Sphere((0, 0, 1), 0.8, 2)])
    occ, _ = rasterize_scene(sc)
    c = voxel_centers(SPEC)
    inside = np.sum((c - [0, 0, 1]) ** 2, axis=1) <= 0.64
    assert inside.sum() > 0
    assert np.all(occ.labels.ravel()[inside] == 2)


def test_rasterize_matches_loop_oracle(rng):
    for _ in range(3):
        prims = random_primitives(rng)
        occ, _ = rasterize_scene(_scene(prims))
        for idx, p in zip(np.ndindex(*SPEC.dims), voxel_centers(SPEC)):
            want = FREE
            for prim in prims:
                if contains_oracle(prim, p):
                    want = prim.class_id
            assert occ.labels[idx] == want


def test_scene_validation():
    with pytest.raises(DomainError):
        _scene([Box((0, 0, 1), (1, 1, 1), 5)])
    with pytest.raises(DomainError):
        _scene([Sphere((50, 50, 50), 1.0, 0)])
    with pytest.raises(DomainError):
        Sphere((0, 0, 0), 0.0, 0)


def test_ground_plane_depth_from_downward_camera():
    spec = VoxelGridSpec((-20, -20, -1), 0.5, (80, 80, 4))
    h = 3.0
    cam = Camera(Intrinsics(10, 10, 7.5, 5.5, 16, 12), look_at((0, 0, h), (0, 0, 0), up=(0, 1, 0)), 1)
    sc = SceneConfig([GroundPlane(0.0, 0)], CameraRig((cam,)), spec, 1)
    gt = render_gt_labels(sc, cam)
    assert gt.mask.all()
    _, d = camera_rays(cam)
    cos = -d[:, 2]  # angle between pixel ray and the downward optical axis
    np.testing.assert_allclose(gt.depth.ravel(), h / cos, rtol=1e-12)
    np.testing.assert_allclose(gt.normal.reshape(-1, 3), np.tile([0, 0, 1.0], (cam.width * cam.height, 1)))


def test_sphere_on_principal_ray():
    intr = Intrinsics(20, 20, 10, 10, 21, 21)
    cam = Camera(intr, look_at((0, -5, 1), (0, 0, 1)), 1)
    sc = SceneConfig([Sphere((0, 0, 1), 1.0, 0)], CameraRig((cam,)), SPEC, 1)
    gt = render_gt_labels(sc, cam)
    assert gt.depth[10, 10] == pytest.approx(4.0, abs=1e-12)
    np.testing.assert_allclose(gt.normal[10, 10], [0, -1, 0], atol=1e-12)
    assert gt.semantic[10, 10] == 0 and not gt.mask[0, 0]


def march_oracle(scene, o, d, step=1e-3, t_max=25.0):
    """First inside-scene point along a ray by dense stepping."""
    lo, hi = np.asarray(scene.spec.min_corner), np.asarray(scene.spec.max_corner)
    ts = np.arange(0, t_max, step)
    p = o + ts[:, None] * d
    inside = np.all((p >= lo) & (p <= hi), axis=1)
    cls = np.full(len(ts), -1)
    for prim in scene.primitives:
        cls = np.where(inside & prim.contains(p), prim.class_id, cls)
    k = np.nonzero(cls >= 0)[0]
    return (None, -1) if len(k) == 0 else (ts[k[0]], cls[k[0]])


def test_first_hit_matches_ray_march(rng):
    prims = random_primitives(rng)
    sc = _scene(prims)
    cam = Camera(Intrinsics(20, 20, 7.5, 7.5, 16, 16), look_at((6, -5, 4), (0, 0, 0.3)), 1)
    o, d = camera_rays(cam)
    pick = rng.choice(len(o), 60, replace=False)
    t, c, n, hit = first_hit(sc, o[pick], d[pick])
    n_hits = 0
    for k in range(60):
        tm, cm = march_oracle(sc, o[pick][k], d[pick][k])
        if tm is None:
            assert not hit[k]
            continue
        n_hits += 1
        assert hit[k] and abs(t[k] - tm) < 2e-3
    assert n_hits > 20


def test_gt_normals_unit_and_front_facing(rng):
    sc = default_scene(dims=(16, 16, 16), voxel_size=0.5, width=24)
    for cam in sc.rig.by_id()[:3]:
        gt = render_gt_labels(sc, cam)
        _, d = camera_rays(cam)
        n = gt.normal.reshape(-1, 3)[gt.mask.ravel()]
        np.testing.assert_allclose(np.linalg.norm(n, axis=1), 1.0, atol=1e-9)
        assert np.all(np.sum(n * d[gt.mask.ravel()], axis=1) < 0)


def test_supersampled_labels(rng):
    sc = default_scene(dims=(16, 16, 16), voxel_size=0.5, width=16)
    cam = sc.rig.by_id()[0]
    g1 = render_gt_labels(sc, cam)
    g3 = render_gt_labels(sc, cam, supersample=3)
    assert g3.mask.sum() <= g1.mask.sum()
    both = g1.mask & g3.mask
    assert np.median(np.abs(g1.depth[both] - g3.depth[both])) < 0.05
    with pytest.raises(DomainError):
        render_gt_labels(sc, cam, supersample=0)


def test_lidar_empty_scene():
    sc = SceneConfig([], ring_rig(2, width=8, height_px=8), SPEC, 1)
    hits = simulate_lidar(sc, (0, 0, 1), 4, 16)
    assert len(hits.points) == 0
    lab = project_labels(hits, sc.rig.cameras[0])
    assert not lab.mask.any()


def test_lidar_plane_depths_are_camera_z():
    spec = VoxelGridSpec((-20, -20, -1), 0.5, (80, 80, 4))
    cam = Camera(Intrinsics(8, 8, 7.5, 7.5, 16, 16), look_at((0, 0, 2), (4, 0, 0)), 1)
    sc = SceneConfig([GroundPlane(0.0, 0)], CameraRig((cam,)), spec, 1)
    hits = simulate_lidar(sc, (0, 0, 2), 8, 90, seed=1, elevation_deg=(-40, -10))
    assert len(hits.points) == 8 * 90  # every downward beam hits
    np.testing.assert_allclose(hits.points[:, 2], 0.0, atol=1e-12)
    lab = project_labels(hits, cam)
    assert lab.mask.sum() > 10
    for p in hits.points:
        pr = project_point(cam, p)
        if pr is None:
            continue
        r, c = int(np.floor(pr[1] + 0.5)), int(np.floor(pr[0] + 0.5))
        if 0 <= r < 16 and 0 <= c < 16:
            assert lab.depth[r, c] <= pr[2] + 1e-12
    again = simulate_lidar(sc, (0, 0, 2), 8, 90, seed=1, elevation_deg=(-40, -10))
    np.testing.assert_array_equal(again.points, hits.points)


def test_lidar_zbuffer_keeps_nearest():
    cam = Camera(Intrinsics(8, 8, 7.5, 7.5, 16, 16), look_at((0, -5, 0), (0, 0, 0)), 1)
    pts = np.array([[0.0, 3.0, 0.0], [0.0, 0.0, 0.0]])  # same pixel, depths 8 and 5
    lab = project_labels(LidarHits(pts, np.array([1, 2]), np.zeros(2)), cam)
    assert lab.mask.sum() == 1
    assert lab.depth[lab.mask][0] == pytest.approx(5.0) and lab.semantic[lab.mask][0] == 2


def test_zdepth_to_distance():
    cam = Camera(Intrinsics(10, 10, 7.5, 7.5, 16, 16), look_at((0, 0, 3), (0, 0, 0), up=(0, 1, 0)), 1)
    _, d = camera_rays(cam)
    cos = -d[:, 2]
    np.testing.assert_allclose(zdepth_to_distance(cam, np.full((16, 16), 3.0)).ravel(), 3.0 / cos, rtol=1e-12)


def test_render_consistency_with_gt_labels():
    sc = default_scene(n_cameras=4, dims=(32, 32, 32), voxel_size=0.25, width=32)
    _, dens = rasterize_scene(sc)
    cfg = SamplerConfig(step=sc.spec.voxel_size / 8, interpolation="nearest")
    good = total = 0
    for cam in sc.rig.by_id():
        gt = render_gt_labels(sc, cam)
        maps = render_view(cam, dens, cfg=cfg)
        err = np.abs(maps.depth - gt.depth)[gt.mask]
        good += np.sum(err <= 1.5 * sc.spec.voxel_size)
        total += gt.mask.sum()
    assert good / total >= 0.95


def test_observed_mask_excludes_interior():
    sc = _scene([Box((0, 0, 1), (3, 3, 2), 1)], rig=ring_rig(4, radius=8, height=3, width=32, height_px=32))
    occ, _ = rasterize_scene(sc)
    seen = observed_mask(occ, sc.rig)
    c = voxel_centers(SPEC).reshape(SPEC.dims + (3,))
    core = np.all(np.abs(c - [0, 0, 1]) < [1.0, 1.0, 0.5], axis=-1)
    assert core.any() and not seen[core].any()
    assert seen[occ.labels == 1].sum() > 0


def test_scene_json_round_trip(tmp_path):
    sc = default_scene()
    save_scene(sc, tmp_path / "s.json")
    back = load_scene(tmp_path / "s.json")
    assert back.to_json() == json.loads(json.dumps(sc.to_json()))
    np.testing.assert_array_equal(rasterize_scene(back)[0].labels, rasterize_scene(sc)[0].labels)


@pytest.mark.parametrize("name", ["demo", "slab"])
def test_bundled_scenes_load(name):
    sc = load_scene(bundled_scene_path(name))
    assert np.any(rasterize_scene(sc)[0].labels != FREE)
    with pytest.raises(DomainError):
        bundled_scene_path("missing")


def test_demo_equals_default_scene():
    demo = load_scene(bundled_scene_path("demo"))
    np.testing.assert_array_equal(rasterize_scene(demo)[0].labels, rasterize_scene(default_scene())[0].labels)
    assert len(demo.rig) == 6
