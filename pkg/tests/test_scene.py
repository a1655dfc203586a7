"""Scene model, covariance construction, and the synthetic generator."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from splatcount.scene import (GenerationError, GroundTruth, Scene, SceneError,
                              SyntheticSceneSpec, covariance_from,
                              generate_orchard, quaternion_to_rotation)

from conftest import make_rng, random_unit_quaternions


def test_covariance_identity_quaternion_unit_scale_is_identity():
    cov = covariance_from((1.0, 0.0, 0.0, 0.0), (1.0, 1.0, 1.0))
    assert np.allclose(cov, np.eye(3))


def test_covariance_identity_quaternion_axis_scales_are_diagonal():
    cov = covariance_from((1.0, 0.0, 0.0, 0.0), (2.0, 1.0, 1.0))
    assert np.allclose(cov, np.diag([4.0, 1.0, 1.0]))


def test_covariance_matches_reference_rotation_and_eigenvalues():
    rng = make_rng(3)
    for q in random_unit_quaternions(rng, 25):
        scale = rng.uniform(0.1, 3.0, 3)
        cov = covariance_from(q, scale)
        # scipy uses xyzw quaternion order; ours is scalar-first wxyz
        r = Rotation.from_quat([q[1], q[2], q[3], q[0]]).as_matrix()
        expected = r @ np.diag(scale ** 2) @ r.T
        assert np.allclose(cov, expected, atol=1e-12)
        eig = np.sort(np.linalg.eigvalsh(cov))
        assert np.allclose(eig, np.sort(scale ** 2), atol=1e-9)


def test_quaternion_rotation_matches_scipy():
    rng = make_rng(11)
    for q in random_unit_quaternions(rng, 25):
        r = quaternion_to_rotation(q)
        ref = Rotation.from_quat([q[1], q[2], q[3], q[0]]).as_matrix()
        assert np.allclose(r, ref, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(min_value=0, max_value=2 ** 31 - 1))
def test_covariance_symmetric_positive_definite(seed):
    rng = make_rng(seed)
    q = random_unit_quaternions(rng, 1)[0]
    scale = rng.uniform(1e-3, 5.0, 3)
    cov = covariance_from(q, scale)
    assert np.abs(cov - cov.T).max() < 1e-12
    np.linalg.cholesky(cov)  # raises if not PD


def test_covariance_rejects_non_finite():
    with pytest.raises(SceneError):
        covariance_from((np.nan, 0, 0, 0), (1, 1, 1))
    with pytest.raises(SceneError):
        covariance_from((1, 0, 0, 0), (1, np.inf, 1))


def test_scene_rejects_denormalized_quaternion():
    with pytest.raises(SceneError):
        Scene(np.zeros((1, 3)), np.array([[1.0, 0.5, 0.0, 0.0]]),
              np.ones((1, 3)), np.zeros((1, 3)), np.array([0.5]),
              np.zeros((1, 3, 3)))


def test_scene_rejects_out_of_range_opacity_and_scale():
    good_q = np.array([[1.0, 0.0, 0.0, 0.0]])
    with pytest.raises(SceneError):
        Scene(np.zeros((1, 3)), good_q, np.ones((1, 3)), np.zeros((1, 3)),
              np.array([1.5]), np.zeros((1, 3, 3)))
    with pytest.raises(SceneError):
        Scene(np.zeros((1, 3)), good_q, np.array([[1.0, -0.1, 1.0]]),
              np.zeros((1, 3)), np.array([0.5]), np.zeros((1, 3, 3)))


def test_orchard_zero_fruits_has_empty_ground_truth():
    spec = SyntheticSceneSpec(fruit_count=0, foliage_gaussians=200,
                              trunk_segments=4, rng_seed=1)
    scene, gt = generate_orchard(spec)
    assert gt.fruit_count == 0
    assert gt.centers.shape == (0, 3)
    assert scene.opacities.shape[0] > 0


def test_orchard_single_fruit_no_foliage_is_one_compact_cluster():
    spec = SyntheticSceneSpec(fruit_count=1, foliage_gaussians=0,
                              trunk_segments=0, rng_seed=2)
    scene, gt = generate_orchard(spec)
    assert gt.fruit_count == 1
    # every splat belongs to the fruit: all centers near the one gt center
    d = np.linalg.norm(scene.centers - gt.centers[0], axis=1)
    assert d.max() < 3 * spec.fruit_radius_mean
    # fruit clusters are 8..32 splats
    assert 8 <= scene.opacities.shape[0] <= 32


def test_orchard_ground_truth_count_matches_centers():
    spec = SyntheticSceneSpec(fruit_count=12, foliage_gaussians=500,
                              trunk_segments=6, canopy_extent=(3, 2, 3),
                              rng_seed=5)
    _, gt = generate_orchard(spec)
    assert gt.fruit_count == 12
    assert gt.centers.shape == (12, 3)


def test_orchard_fruit_centers_respect_separation():
    spec = SyntheticSceneSpec(fruit_count=25, foliage_gaussians=0,
                              trunk_segments=0, canopy_extent=(4, 3, 4),
                              rng_seed=9)
    _, gt = generate_orchard(spec)
    d = np.linalg.norm(gt.centers[:, None] - gt.centers[None, :], axis=2)
    d[np.diag_indices(25)] = np.inf
    assert d.min() >= 2 * spec.fruit_radius_mean


def test_orchard_contact_pairs_are_close_but_counted_apart():
    spec = SyntheticSceneSpec(fruit_count=10, contact_pairs=2,
                              foliage_gaussians=0, trunk_segments=0,
                              canopy_extent=(4, 3, 4), rng_seed=4)
    _, gt = generate_orchard(spec)
    assert gt.fruit_count == 10
    d = np.linalg.norm(gt.centers[:, None] - gt.centers[None, :], axis=2)
    d[np.diag_indices(10)] = np.inf
    # the requested pairs sit within the contact band
    assert (d.min(axis=1) < 2.5 * spec.fruit_radius_mean).sum() >= 4


def test_orchard_same_seed_is_identical():
    spec = SyntheticSceneSpec(fruit_count=8, foliage_gaussians=300,
                              trunk_segments=5, canopy_extent=(3, 2, 3),
                              rng_seed=7)
    s1, g1 = generate_orchard(spec)
    s2, g2 = generate_orchard(spec)
    for field in ("centers", "rotations", "scales", "colors", "opacities",
                  "codes"):
        assert np.array_equal(getattr(s1, field), getattr(s2, field))
    assert np.array_equal(g1.centers, g2.centers)


def test_orchard_overfull_canopy_raises_generation_error():
    spec = SyntheticSceneSpec(fruit_count=5000, foliage_gaussians=0,
                              trunk_segments=0,
                              canopy_extent=(0.3, 0.3, 0.3), rng_seed=0)
    with pytest.raises(GenerationError):
        generate_orchard(spec)


def test_orchard_fruit_codes_carry_fruit_label():
    codes_map = {"fruit": (0.9, 0.1, -0.2), "foliage": (0.0, 0.8, 0.0),
                 "branch": (-0.5, 0.0, 0.5)}
    spec = SyntheticSceneSpec(fruit_count=3, foliage_gaussians=50,
                              trunk_segments=3, canopy_extent=(2, 2, 2),
                              rng_seed=3)
    scene, gt = generate_orchard(spec, label_codes=codes_map)
    whole = scene.codes[:, 2, :]
    hits = np.all(np.isclose(whole, codes_map["fruit"]), axis=1)
    assert hits.sum() >= 8 * 3  # at least 8 splats per fruit


def test_ground_truth_json_requires_matching_count():
    gt = GroundTruth(fruit_count=2, centers=np.zeros((2, 3)))
    assert GroundTruth.from_json(gt.to_json()).fruit_count == 2
    bad = '{"fruit_count": 2, "centers": [[0, 0, 0]]}'
    with pytest.raises(ValueError):
        GroundTruth.from_json(bad)
