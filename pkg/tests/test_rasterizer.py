"""Tile rasterizer: projection, binning, scheduling, compositing."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from splatcount.rasterizer import (ALPHA_CLAMP, KERNEL_CUTOFF, LAMBDA_BLUR,
                                   LoadReport, RenderConfig, RenderError,
                                   bin_tiles, compositing_weights, project,
                                   render_features, render_rgb,
                                   schedule_tiles)
from splatcount.scene import Camera, Scene, covariance_from

from conftest import identity_camera, make_rng, naive_render, random_scene


def pinhole_camera(cx=32.0, cy=32.0, size=64):
    """Camera whose optical axis hits an exact pixel sample point."""
    return Camera(fx=100.0, fy=100.0, cx=cx, cy=cy, rotation=np.eye(3),
                  translation=np.zeros(3), width=size, height=size)


def simple_scene(centers, colors, opacities, scale=0.1, codes=None):
    n = len(centers)
    rot = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    scales = np.full((n, 3), scale)
    if codes is None:
        codes = np.zeros((n, 3, 3))
    return Scene(np.asarray(centers, dtype=np.float64), rot, scales,
                 np.asarray(colors, dtype=np.float64),
                 np.asarray(opacities, dtype=np.float64), codes)


# ---------------------------------------------------------------- projection

def test_project_optical_axis():
    cam = Camera(fx=100.0, fy=100.0, cx=50.0, cy=50.0, rotation=np.eye(3),
                 translation=np.zeros(3), width=100, height=100)
    p = project(cam, [0.0, 0.0, 5.0], 0.01 * np.eye(3))
    assert np.allclose(p.u, [50.0, 50.0])
    assert p.depth == 5.0


def test_project_offset_point():
    cam = Camera(fx=100.0, fy=100.0, cx=50.0, cy=50.0, rotation=np.eye(3),
                 translation=np.zeros(3), width=100, height=100)
    p = project(cam, [1.0, 0.0, 5.0], 0.01 * np.eye(3))
    assert np.allclose(p.u, [70.0, 50.0])


def test_project_isotropic_cov2d_includes_blur():
    cam = Camera(fx=100.0, fy=100.0, cx=50.0, cy=50.0, rotation=np.eye(3),
                 translation=np.zeros(3), width=100, height=100)
    p = project(cam, [0.0, 0.0, 5.0], 0.01 * np.eye(3))
    # fx/z = 20, so the screen variance is 0.01 * 400 = 4 per axis.
    assert np.allclose(p.cov2d, (4.0 + LAMBDA_BLUR) * np.eye(2), atol=1e-12)
    eigs = np.linalg.eigvalsh(p.cov2d)
    assert np.isclose(p.radius, KERNEL_CUTOFF * np.sqrt(eigs.max()))


def _fd_jacobian(cam, center, h=1e-5):
    """Central-difference Jacobian of the world -> pixel map."""

    def uv(p):
        c = cam.rotation @ p + cam.translation
        return np.array([cam.fx * c[0] / c[2] + cam.cx,
                         cam.fy * c[1] / c[2] + cam.cy])

    jac = np.zeros((2, 3))
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        jac[:, k] = (uv(center + e) - uv(center - e)) / (2.0 * h)
    return jac


def test_project_cov2d_matches_numerical_jacobian():
    rng = make_rng(17)
    for case in range(10):
        rot = Rotation.random(random_state=int(rng.integers(1 << 31)))
        cam = Camera(fx=rng.uniform(50, 200), fy=rng.uniform(50, 200),
                     cx=32.0, cy=32.0, rotation=rot.as_matrix(),
                     translation=rng.uniform(-1, 1, 3), width=64, height=64)
        cam_pt = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1),
                           rng.uniform(2, 8)])
        center = rot.as_matrix().T @ (cam_pt - cam.translation)
        a = rng.standard_normal((3, 3)) * 0.1
        cov3d = a @ a.T + 1e-4 * np.eye(3)
        p = project(cam, center, cov3d)
        assert p is not None, f"case {case} unexpectedly behind camera"
        jac = _fd_jacobian(cam, center)
        oracle = jac @ cov3d @ jac.T
        got = p.cov2d - LAMBDA_BLUR * np.eye(2)
        rel = np.linalg.norm(got - oracle) / np.linalg.norm(oracle)
        assert rel < 1e-6, f"case {case}: rel err {rel:.2e}"


def test_project_behind_camera_returns_none():
    cam = pinhole_camera()
    assert project(cam, [0.0, 0.0, -1.0], 0.01 * np.eye(3)) is None
    assert project(cam, [0.0, 0.0, 0.005], 0.01 * np.eye(3)) is None


def test_project_non_finite_input_raises():
    cam = pinhole_camera()
    with pytest.raises(RenderError):
        project(cam, [np.nan, 0.0, 5.0], 0.01 * np.eye(3))


# ------------------------------------------------------- compositing weights

def test_weights_single_clamped_alpha():
    w, t = compositing_weights([ALPHA_CLAMP])
    assert np.allclose(w, [0.99])
    assert np.isclose(t, 0.01)


def test_weights_two_half_alphas():
    w, t = compositing_weights([0.5, 0.5])
    assert np.allclose(w, [0.5, 0.25])
    assert np.isclose(t, 0.25)


def test_weights_match_product_oracle():
    rng = make_rng(3)
    a = rng.uniform(0.0, 1.0, 10)
    w, t = compositing_weights(a)
    for i in range(10):
        expect = a[i] * np.prod(1.0 - a[:i])
        assert abs(w[i] - expect) < 1e-12
    assert abs(t - np.prod(1.0 - a)) < 1e-12
    assert abs(w.sum() + t - 1.0) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(min_value=0.0, max_value=1.0), max_size=30))
def test_weights_telescope_to_one(alphas):
    w, t = compositing_weights(alphas)
    assert abs(w.sum() + t - 1.0) < 1e-9


def test_weights_reject_bad_input():
    with pytest.raises(RenderError):
        compositing_weights([[0.1, 0.2]])
    with pytest.raises(RenderError):
        compositing_weights([0.5, 1.5])
    with pytest.raises(RenderError):
        compositing_weights([-0.1])


# -------------------------------------------------------------------- binning

def test_bin_single_gaussian_single_tile():
    cam = pinhole_camera()
    # projects to u=(24,24), interior of tile (1,1); footprint ~1.8 px
    scene = simple_scene([[-0.4, -0.4, 5.0]], [[1, 0, 0]], [0.9], scale=0.01)
    bins, report = bin_tiles(scene, cam, RenderConfig(prune_threshold=0.0))
    sizes = [e.size for e in bins.entries]
    assert sum(sizes) == 1
    hot = int(np.argmax(sizes))
    ty, tx = divmod(hot, bins.tiles_x)
    assert (tx, ty) == (1, 1)
    assert report.loads[hot] > 0.0
    assert report.total == pytest.approx(report.loads.sum())


def test_bin_prunes_low_opacity():
    cam = pinhole_camera()
    scene = simple_scene([[0.0, 0.0, 5.0]], [[1, 0, 0]], [0.001])
    bins, _ = bin_tiles(scene, cam, RenderConfig())
    assert all(e.size == 0 for e in bins.entries)
    keep, _ = bin_tiles(scene, cam, RenderConfig(prune_threshold=0.0))
    assert sum(e.size for e in keep.entries) > 0


def test_bin_superset_of_significant_pixels():
    """Every pixel a splat can touch lies in a tile that splat is binned to."""
    cam = identity_camera(64, 64)
    scene = random_scene(seed=21, n=40)
    config = RenderConfig(prune_threshold=0.0)
    bins, _ = bin_tiles(scene, cam, config)
    member = np.zeros((len(scene), bins.tile_count), dtype=bool)
    for k, e in enumerate(bins.entries):
        member[e, k] = True

    xs = np.arange(64, dtype=np.float64)
    px, py = np.meshgrid(xs, xs)
    for i in range(len(scene)):
        p = project(cam, scene.centers[i],
                    covariance_from(scene.rotations[i], scene.scales[i]))
        if p is None:
            continue
        inv = np.linalg.inv(p.cov2d)
        dx = px - p.u[0]
        dy = py - p.u[1]
        m = inv[0, 0] * dx * dx + 2 * inv[0, 1] * dx * dy + inv[1, 1] * dy * dy
        w = scene.opacities[i] * np.exp(-0.5 * m)
        w[m > KERNEL_CUTOFF ** 2] = 0.0
        yy, xx = np.where(w > 1e-6)
        tiles = ((yy // bins.tile_size) * bins.tiles_x
                 + (xx // bins.tile_size))
        assert member[i, np.unique(tiles)].all(), f"splat {i} missing"


def test_bin_entries_depth_sorted_with_index_ties():
    cam = pinhole_camera()
    centers = [[0.0, 0.0, 7.0], [0.0, 0.0, 5.0], [0.0, 0.0, 5.0]]
    scene = simple_scene(centers, [[1, 0, 0]] * 3, [0.5] * 3, scale=0.01)
    bins, _ = bin_tiles(scene, cam, RenderConfig(prune_threshold=0.0))
    hot = max(bins.entries, key=lambda e: e.size)
    assert hot.tolist() == [1, 2, 0]


def test_bin_loads_zero_only_on_empty_tiles():
    cam = identity_camera(64, 64)
    scene = random_scene(seed=22, n=30)
    bins, report = bin_tiles(scene, cam, RenderConfig(prune_threshold=0.0))
    for e, load in zip(bins.entries, report.loads):
        if e.size:
            assert load > 0.0
        else:
            assert load == 0.0


# ----------------------------------------------------------------- scheduling

def _report(loads):
    return LoadReport(tile_size=16, tiles_x=len(loads), tiles_y=1,
                      loads=np.asarray(loads, dtype=np.float64))


def test_schedule_known_lpt_outcome():
    # textbook LPT trace: 5->A, 4->B, 3->B, 3->A, 3->B, makespan 10 vs opt 9
    s = schedule_tiles(_report([5, 4, 3, 3, 3]), 2)
    assert sorted(s.group_loads.tolist()) == [8.0, 10.0]
    assert s.group_loads.max() <= (4.0 / 3.0) * 9.0
    assert np.isclose(s.imbalance_ratio, 10.0 / 9.0)


def test_schedule_single_group_holds_everything():
    s = schedule_tiles(_report([5, 4, 3, 3, 3]), 1)
    assert len(s.groups) == 1
    assert sorted(s.groups[0].tolist()) == [0, 1, 2, 3, 4]
    assert np.isclose(s.imbalance_ratio, 1.0)


def test_schedule_partitions_tiles():
    rng = make_rng(4)
    loads = rng.uniform(0, 10, 40)
    s = schedule_tiles(_report(loads), 6)
    seen = np.concatenate([g for g in s.groups])
    assert sorted(seen.tolist()) == list(range(40))
    for g, gl in zip(s.groups, s.group_loads):
        assert np.isclose(loads[g].sum(), gl)


def test_schedule_deterministic():
    rng = make_rng(5)
    loads = rng.uniform(0, 10, 30)
    a = schedule_tiles(_report(loads), 4)
    b = schedule_tiles(_report(loads), 4)
    assert all(np.array_equal(x, y) for x, y in zip(a.groups, b.groups))


def _optimal_makespan(loads, groups):
    """Exhaustive best assignment; branch and bound with symmetry pruning."""
    loads = sorted(loads, reverse=True)
    best = [sum(loads)]
    cur = [0.0] * groups

    def rec(i):
        if max(cur) >= best[0]:
            return
        if i == len(loads):
            best[0] = max(cur)
            return
        seen = set()
        for g in range(groups):
            if cur[g] in seen:
                continue
            seen.add(cur[g])
            cur[g] += loads[i]
            rec(i + 1)
            cur[g] -= loads[i]

    rec(0)
    return best[0]


def test_schedule_within_four_thirds_of_optimal():
    rng = make_rng(6)
    for case in range(20):
        n = int(rng.integers(2, 13))
        groups = int(rng.integers(2, 4))
        loads = rng.uniform(0.1, 10.0, n)
        s = schedule_tiles(_report(loads), groups)
        opt = _optimal_makespan(loads.tolist(), groups)
        assert s.group_loads.max() <= (4.0 / 3.0) * opt + 1e-9, \
            f"case {case}: {s.group_loads.max():.3f} vs opt {opt:.3f}"


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(min_value=0.0, max_value=100.0), min_size=1,
                max_size=30),
       st.integers(min_value=1, max_value=8))
def test_schedule_bound_property(loads, groups):
    """Graham's list-scheduling guarantee holds for every input."""
    s = schedule_tiles(_report(loads), groups)
    bound = sum(loads) / groups + (1.0 - 1.0 / groups) * max(loads)
    assert s.group_loads.max() <= bound + 1e-9


# ------------------------------------------------------------------ rendering

def test_render_empty_scene_is_background():
    scene = Scene(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)),
                  np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3, 3)),
                  background_color=(0.2, 0.4, 0.6))
    fb = render_rgb(scene, identity_camera(32, 32))
    assert np.allclose(fb.color, [0.2, 0.4, 0.6])
    assert np.all(fb.transmittance == 1.0)
    assert np.all(fb.contributions == 0)


def test_render_opaque_splat_hits_alpha_ceiling():
    cam = pinhole_camera()
    scene = simple_scene([[0.0, 0.0, 5.0]], [[1, 0, 0]], [1.0], scale=0.1)
    fb = render_rgb(scene, cam)
    # alpha 1 at the exact sample point clamps to 0.99
    assert np.allclose(fb.color[32, 32], [ALPHA_CLAMP, 0.0, 0.0], atol=1e-12)
    assert np.isclose(fb.transmittance[32, 32], 1.0 - ALPHA_CLAMP)


def test_render_two_half_transparent_splats():
    cam = pinhole_camera()
    scene = simple_scene([[0.0, 0.0, 6.0], [0.0, 0.0, 4.0]],
                         [[0, 0, 1], [1, 0, 0]], [0.5, 0.5], scale=0.05)
    fb = render_rgb(scene, cam)
    assert np.allclose(fb.color[32, 32], [0.5, 0.0, 0.25], atol=1e-12)
    assert np.isclose(fb.transmittance[32, 32], 0.25)


def test_tile_render_matches_naive_oracle():
    scene = random_scene(seed=31, n=120)
    cam = identity_camera(64, 64)
    config = RenderConfig(prune_threshold=0.0, transmittance_floor=1e-12,
                          contribution_cap=None)
    fb = render_rgb(scene, cam, config)
    img, trans = naive_render(scene, cam)
    assert np.abs(fb.color - img).max() < 1e-5
    assert np.abs(fb.transmittance - trans).max() < 1e-5


def test_render_order_independent():
    scene = random_scene(seed=32, n=80)
    rng = make_rng(99)
    perm = rng.permutation(len(scene))
    shuffled = Scene(scene.centers[perm], scene.rotations[perm],
                     scene.scales[perm], scene.colors[perm],
                     scene.opacities[perm], scene.codes[perm])
    cam = identity_camera(64, 64)
    a = render_rgb(scene, cam)
    b = render_rgb(shuffled, cam)
    assert np.array_equal(a.color, b.color)
    assert np.array_equal(a.transmittance, b.transmittance)


def test_render_threads_match_serial():
    scene = random_scene(seed=33, n=100)
    cam = identity_camera(64, 64)
    a = render_rgb(scene, cam, threads=1)
    b = render_rgb(scene, cam, threads=3)
    assert np.array_equal(a.color, b.color)


def test_feature_render_empty_scene():
    scene = Scene(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)),
                  np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3, 3)))
    fi = render_features(scene, identity_camera(32, 32))
    assert np.all(fi.features == 0.0)
    assert np.all(fi.weight_sum == 0.0)


def test_feature_render_single_splat_payload():
    cam = pinhole_camera()
    codes = np.zeros((1, 3, 3))
    codes[0, 2] = [1.0, 0.0, 0.0]
    scene = simple_scene([[0.0, 0.0, 5.0]], [[1, 1, 1]], [1.0], scale=0.1,
                         codes=codes)
    fi = render_features(scene, cam, level="w")
    assert np.allclose(fi.features[32, 32], [ALPHA_CLAMP, 0.0, 0.0],
                       atol=1e-12)
    assert np.isclose(fi.weight_sum[32, 32], ALPHA_CLAMP)


def test_feature_render_conserves_weight():
    scene = random_scene(seed=34, n=150)
    fi = render_features(scene, identity_camera(64, 64))
    total = fi.weight_sum + fi.transmittance
    assert np.abs(total - 1.0).max() < 1e-6


def test_contribution_cap_monotone():
    scene = random_scene(seed=35, n=150, spread=0.4)
    cam = identity_camera(64, 64)
    small = render_rgb(scene, cam, RenderConfig(contribution_cap=4))
    large = render_rgb(scene, cam, RenderConfig(contribution_cap=16))
    assert np.all(small.contributions <= 4)
    assert np.all(large.contributions >= small.contributions)


def test_render_config_validation():
    bad = [RenderConfig(tile_size=0), RenderConfig(prune_threshold=-0.1),
           RenderConfig(prune_threshold=1.5),
           RenderConfig(transmittance_floor=0.0),
           RenderConfig(contribution_cap=0), RenderConfig(worker_groups=0),
           RenderConfig(z_near=0.0)]
    for cfg in bad:
        with pytest.raises(RenderError):
            cfg.validate()
