"""Scene model: anisotropic 3D Gaussian splats, pinhole cameras, and a
synthetic orchard generator with per-fruit ground truth.

A splat is (center, unit quaternion, per-axis scale, RGB color, opacity)
plus three compressed semantic codes, one per level: subpart "s", part
"p", whole "w". Scenes store splats as parallel arrays and are immutable
after construction.
"""

from __future__ import annotations

import dataclasses
import json
from typing import Mapping, Sequence

import numpy as np

LEVELS = ("s", "p", "w")
CODE_DIM = 3

# Default latent codes used by the generator when no autoencoder-derived
# mapping is supplied. Downstream prompt queries must use codes consistent
# with the query-side autoencoder; the CLI wires that up.
DEFAULT_LABEL_CODES = {
    "fruit": (1.0, 0.0, 0.0),
    "foliage": (0.0, 1.0, 0.0),
    "branch": (0.0, 0.0, 1.0),
}

QUAT_NORM_TOL = 1e-6


class SceneError(ValueError):
    """Raised for invalid splat parameters."""


class GenerationError(RuntimeError):
    """Raised when the synthetic generator cannot satisfy its constraints."""


def _as_float_array(x, shape, name):
    arr = np.asarray(x, dtype=np.float64)
    if arr.shape != shape:
        raise SceneError(f"{name} has shape {arr.shape}, expected {shape}")
    if not np.all(np.isfinite(arr)):
        raise SceneError(f"{name} contains non-finite values")
    return arr


def quaternion_to_rotation(q) -> np.ndarray:
    """Rotation matrix for a scalar-first unit quaternion (w, x, y, z)."""
    q = _as_float_array(q, (4,), "quaternion")
    return quaternions_to_rotations(q[None, :])[0]


def quaternions_to_rotations(q: np.ndarray) -> np.ndarray:
    """Batched quaternion -> rotation matrices, (n, 4) -> (n, 3, 3)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3), dtype=np.float64)
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def covariance_from(rotation, scale) -> np.ndarray:
    """World covariance R diag(scale^2) R^T of one splat.

    Args:
        rotation: unit quaternion (w, x, y, z), norm within 1e-6 of 1.
        scale: per-axis standard deviations, all > 0.

    Returns:
        Symmetric positive definite (3, 3) matrix.
    """
    q = _as_float_array(rotation, (4,), "rotation")
    s = _as_float_array(scale, (3,), "scale")
    if abs(np.linalg.norm(q) - 1.0) > QUAT_NORM_TOL:
        raise SceneError(f"quaternion norm {np.linalg.norm(q):.8f} not within "
                         f"{QUAT_NORM_TOL} of 1")
    if np.any(s <= 0):
        raise SceneError("scale entries must be strictly positive")
    R = quaternion_to_rotation(q)
    return (R * (s * s)) @ R.T


@dataclasses.dataclass(frozen=True)
class Gaussian3D:
    """One splat; `codes` has shape (3, 3): rows s/p/w, columns latent dims."""

    center: np.ndarray
    rotation: np.ndarray
    scale: np.ndarray
    color: np.ndarray
    opacity: float
    codes: np.ndarray

    def covariance(self) -> np.ndarray:
        return covariance_from(self.rotation, self.scale)


class Scene:
    """Ordered, immutable collection of splats stored as parallel arrays."""

    def __init__(self, centers, rotations, scales, colors, opacities, codes,
                 background_color=(0.0, 0.0, 0.0)):
        n = np.asarray(centers).shape[0] if np.asarray(centers).size else 0
        self.centers = _as_float_array(centers, (n, 3), "centers")
        self.rotations = _as_float_array(rotations, (n, 4), "rotations")
        self.scales = _as_float_array(scales, (n, 3), "scales")
        self.colors = _as_float_array(colors, (n, 3), "colors")
        self.opacities = _as_float_array(opacities, (n,), "opacities")
        self.codes = _as_float_array(codes, (n, len(LEVELS), CODE_DIM), "codes")
        self.background_color = _as_float_array(
            background_color, (3,), "background_color")

        norms = np.linalg.norm(self.rotations, axis=1)
        bad = np.where(np.abs(norms - 1.0) > QUAT_NORM_TOL)[0]
        if bad.size:
            raise SceneError(
                f"quaternion at index {bad[0]} has norm {norms[bad[0]]:.8f}, "
                f"not within {QUAT_NORM_TOL} of 1")
        if np.any(self.scales <= 0):
            raise SceneError("scales must be strictly positive")
        if np.any((self.opacities < 0) | (self.opacities > 1)):
            raise SceneError("opacities must lie in [0, 1]")
        if np.any((self.colors < 0) | (self.colors > 1)):
            raise SceneError("colors must lie in [0, 1]")
        for arr in (self.centers, self.rotations, self.scales, self.colors,
                    self.opacities, self.codes, self.background_color):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return self.centers.shape[0]

    def gaussian(self, i: int) -> Gaussian3D:
        return Gaussian3D(self.centers[i], self.rotations[i], self.scales[i],
                          self.colors[i], float(self.opacities[i]),
                          self.codes[i])

    def covariances(self) -> np.ndarray:
        """All world covariances, (n, 3, 3)."""
        R = quaternions_to_rotations(self.rotations)
        return np.einsum("nij,nj,nkj->nik", R, self.scales ** 2, R)

    def level_codes(self, level: str) -> np.ndarray:
        """Codes of one semantic level as an (n, 3) array."""
        return self.codes[:, LEVELS.index(level), :]

    def with_codes(self, level: str, new_codes: np.ndarray) -> "Scene":
        """New scene with one level's codes replaced; everything else shared."""
        codes = self.codes.copy()
        codes[:, LEVELS.index(level), :] = new_codes
        return Scene(self.centers, self.rotations, self.scales, self.colors,
                     self.opacities, codes, self.background_color)

    def subset(self, indices) -> "Scene":
        """New scene keeping the selected splats in the given order."""
        idx = np.asarray(indices, dtype=np.int64)
        return Scene(self.centers[idx], self.rotations[idx], self.scales[idx],
                     self.colors[idx], self.opacities[idx], self.codes[idx],
                     self.background_color)

    @staticmethod
    def from_gaussians(gaussians: Sequence[Gaussian3D],
                       background_color=(0.0, 0.0, 0.0)) -> "Scene":
        n = len(gaussians)
        if n == 0:
            return Scene.empty(background_color)
        return Scene(
            np.stack([g.center for g in gaussians]),
            np.stack([g.rotation for g in gaussians]),
            np.stack([g.scale for g in gaussians]),
            np.stack([g.color for g in gaussians]),
            np.array([g.opacity for g in gaussians], dtype=np.float64),
            np.stack([g.codes for g in gaussians]),
            background_color)

    @staticmethod
    def empty(background_color=(0.0, 0.0, 0.0)) -> "Scene":
        z = np.zeros
        return Scene(z((0, 3)), z((0, 4)), z((0, 3)), z((0, 3)), z((0,)),
                     z((0, len(LEVELS), CODE_DIM)), background_color)


@dataclasses.dataclass(frozen=True)
class Camera:
    """Pinhole camera. `rotation`/`translation` map world to camera frame;
    camera z looks forward, y down, x right. Pixel (row r, col c) samples
    the image plane at continuous coordinates (x=c, y=r)."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "rotation",
                           _as_float_array(self.rotation, (3, 3), "rotation"))
        object.__setattr__(self, "translation",
                           _as_float_array(self.translation, (3,),
                                           "translation"))
        if self.width < 1 or self.height < 1:
            raise SceneError("image dimensions must be positive")
        if self.fx <= 0 or self.fy <= 0:
            raise SceneError("focal lengths must be positive")

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T \
            + self.translation

    @staticmethod
    def look_at(eye, target, fx, width, height, fy=None, cx=None, cy=None,
                up=(0.0, 1.0, 0.0)) -> "Camera":
        """Camera at `eye` looking toward `target`."""
        eye = _as_float_array(eye, (3,), "eye")
        target = _as_float_array(target, (3,), "target")
        up = _as_float_array(up, (3,), "up")
        forward = target - eye
        fn = np.linalg.norm(forward)
        if fn < 1e-12:
            raise SceneError("eye and target coincide")
        forward = forward / fn
        right = np.cross(forward, up)
        rn = np.linalg.norm(right)
        if rn < 1e-12:
            raise SceneError("view direction is parallel to the up vector")
        right = right / rn
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        return Camera(fx=float(fx), fy=float(fy if fy is not None else fx),
                      cx=float(cx if cx is not None else width / 2.0),
                      cy=float(cy if cy is not None else height / 2.0),
                      rotation=R, translation=-R @ eye,
                      width=int(width), height=int(height))


@dataclasses.dataclass
class SyntheticSceneSpec:
    """Parameters of the synthetic orchard tree.

    The canopy is an axis-aligned box of extent `canopy_extent` whose floor
    sits at y = 1 (trunk below). Fruit centers keep pairwise distance
    >= 2 * fruit_radius_mean except for `contact_pairs` pairs placed
    2.0-2.4 mean radii apart; those are still separate ground-truth fruits.
    """

    fruit_count: int = 113
    fruit_radius_mean: float = 0.06
    fruit_radius_std: float = 0.005
    foliage_gaussians: int = 42000
    trunk_segments: int = 24
    canopy_extent: tuple = (6.0, 4.0, 6.0)
    rng_seed: int = 0
    contact_pairs: int = 0

    def validate(self):
        if self.fruit_count < 0:
            raise SceneError("fruit_count must be >= 0")
        if self.fruit_radius_mean <= 0 or self.fruit_radius_std < 0:
            raise SceneError("fruit radius parameters must be positive")
        if self.foliage_gaussians < 0 or self.trunk_segments < 0:
            raise SceneError("component counts must be >= 0")
        if len(self.canopy_extent) != 3 or min(self.canopy_extent) <= 0:
            raise SceneError("canopy_extent must be three positive lengths")
        if self.contact_pairs < 0 or 2 * self.contact_pairs > self.fruit_count:
            raise SceneError("contact_pairs must satisfy 0 <= 2*pairs <= fruits")
        return self


@dataclasses.dataclass
class GroundTruth:
    """Known fruit layout of a generated scene."""

    fruit_count: int
    centers: np.ndarray  # (fruit_count, 3)

    def to_json(self) -> str:
        return json.dumps({"fruit_count": int(self.fruit_count),
                           "centers": [[float(c) for c in row]
                                       for row in self.centers]},
                          indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "GroundTruth":
        data = json.loads(text)
        count = int(data["fruit_count"])
        centers = np.asarray(data.get("centers", []), dtype=np.float64)
        if centers.size == 0:
            centers = np.zeros((0, 3))
        if centers.shape != (count, 3):
            raise ValueError("ground truth centers do not match fruit_count")
        return GroundTruth(fruit_count=count, centers=centers)


CANOPY_FLOOR_Y = 1.0

# Opacity mixture for foliage: a small slice below the default tile prune
# threshold (1/255) and another below the sampling opacity floor (0.05)
# keep both cut paths exercised on generated scenes.
_FOLIAGE_ULTRA_DIM = 0.02
_FOLIAGE_DIM = 0.03


def _unit_vectors(rng, n):
    v = rng.normal(size=(n, 3))
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    norms[norms < 1e-12] = 1.0
    return v / norms


def _place_fruit_centers(spec: SyntheticSceneSpec, rng) -> np.ndarray:
    ex, ey, ez = spec.canopy_extent
    lo = np.array([-ex / 2, CANOPY_FLOOR_Y, -ez / 2])
    hi = np.array([ex / 2, CANOPY_FLOOR_Y + ey, ez / 2])
    margin = spec.fruit_radius_mean
    sep = 2.0 * spec.fruit_radius_mean
    n_free = spec.fruit_count - spec.contact_pairs
    centers = np.zeros((0, 3))
    # A long run of consecutive rejections means the packing is saturated;
    # bail out instead of grinding through a huge global try budget.
    max_streak = 5000
    streak = 0
    while centers.shape[0] < n_free:
        streak += 1
        if streak > max_streak:
            raise GenerationError(
                f"could not place {spec.fruit_count} fruits in canopy "
                f"{spec.canopy_extent}: {max_streak} consecutive "
                f"rejections at {centers.shape[0]} placed")
        c = rng.uniform(lo + margin, hi - margin)
        if centers.shape[0] and np.min(
                np.linalg.norm(centers - c, axis=1)) < sep:
            continue
        centers = np.vstack([centers, c])
        streak = 0
    # Contact pairs: partner each of the first `contact_pairs` fruits.
    for i in range(spec.contact_pairs):
        streak = 0
        while True:
            streak += 1
            if streak > max_streak:
                raise GenerationError(
                    f"could not place contact pair {i}: {max_streak} "
                    f"consecutive rejections")
            d = rng.uniform(2.0, 2.4) * spec.fruit_radius_mean
            c = centers[i] + d * _unit_vectors(rng, 1)[0]
            if np.any(c < lo + margin) or np.any(c > hi - margin):
                continue
            dist = np.linalg.norm(centers - c, axis=1)
            dist[i] = np.inf  # the partner is allowed to be close
            if np.min(dist, initial=np.inf) < sep:
                continue
            centers = np.vstack([centers, c])
            break
    return centers


def generate_orchard(spec: SyntheticSceneSpec,
                     label_codes: Mapping[str, Sequence[float]] | None = None,
                     ) -> tuple[Scene, GroundTruth]:
    """Build a synthetic tree: trunk, foliage clumps, and shell fruits.

    Args:
        spec: layout parameters; identical specs give identical scenes.
        label_codes: semantic code per label ("fruit", "foliage", "branch");
            defaults to a fixed orthonormal basis. All three levels of a
            splat get its label's code.

    Returns:
        (scene, ground truth). Splat order is trunk, foliage, fruits and is
        stable across runs.
    """
    spec.validate()
    rng = np.random.default_rng(spec.rng_seed)
    codes_map = dict(DEFAULT_LABEL_CODES)
    if label_codes is not None:
        codes_map.update({k: tuple(float(x) for x in v)
                          for k, v in label_codes.items()})

    centers, rotations, scales, colors, opacities, codes = \
        [], [], [], [], [], []

    def emit(c, q, s, col, a, label):
        centers.append(c)
        rotations.append(q)
        scales.append(s)
        colors.append(np.clip(col, 0.0, 1.0))
        opacities.append(float(np.clip(a, 0.0, 1.0)))
        codes.append(np.tile(np.asarray(codes_map[label]), (len(LEVELS), 1)))

    identity_q = np.array([1.0, 0.0, 0.0, 0.0])

    # Trunk: vertical stack of elongated splats from the ground to the canopy.
    k = spec.trunk_segments
    for i in range(k):
        y = (i + 0.5) * CANOPY_FLOOR_Y / max(k, 1)
        c = np.array([0.0, y, 0.0]) + rng.normal(0, 0.01, 3)
        s = np.array([0.09, CANOPY_FLOOR_Y / max(k, 1), 0.09]) \
            * rng.uniform(0.8, 1.2)
        col = np.array([0.35, 0.22, 0.12]) + rng.normal(0, 0.02, 3)
        emit(c, identity_q, s, col, rng.uniform(0.85, 0.95), "branch")

    # Foliage: clumped anisotropic splats filling the canopy box.
    ex, ey, ez = spec.canopy_extent
    lo = np.array([-ex / 2, CANOPY_FLOOR_Y, -ez / 2])
    hi = np.array([ex / 2, CANOPY_FLOOR_Y + ey, ez / 2])
    n_clumps = max(1, spec.foliage_gaussians // 40)
    clump_centers = rng.uniform(lo, hi, size=(n_clumps, 3))
    for i in range(spec.foliage_gaussians):
        clump = clump_centers[int(rng.integers(n_clumps))]
        c = clump + rng.normal(0, 0.25, 3)
        q = _unit_vectors(rng, 1)[0]
        q = np.concatenate([[rng.uniform(-1, 1)], q * rng.uniform(0.2, 1.0)])
        q = q / np.linalg.norm(q)
        s = rng.uniform(0.04, 0.14, 3)
        col = np.array([rng.uniform(0.08, 0.3), rng.uniform(0.35, 0.7),
                        rng.uniform(0.05, 0.25)])
        u = rng.uniform()
        if u < _FOLIAGE_ULTRA_DIM:
            a = rng.uniform(0.0005, 0.0039)
        elif u < _FOLIAGE_ULTRA_DIM + _FOLIAGE_DIM:
            a = rng.uniform(0.01, 0.049)
        else:
            a = rng.uniform(0.3, 0.95)
        emit(c, q, s, col, a, "foliage")

    # Fruits: shells of isotropic splats, sigma = r/3, shell radius r/3, so
    # truncated sampling (Mahalanobis <= 2) keeps points inside radius r.
    fruit_centers = _place_fruit_centers(spec, rng)
    for fc in fruit_centers:
        r = rng.normal(spec.fruit_radius_mean, spec.fruit_radius_std)
        r = max(r, 0.25 * spec.fruit_radius_mean)
        n_g = int(rng.integers(8, 33))
        dirs = _unit_vectors(rng, n_g)
        base = np.array([rng.uniform(0.7, 0.95), rng.uniform(0.05, 0.2),
                         rng.uniform(0.03, 0.15)])
        for j in range(n_g):
            c = fc + (r / 3.0) * dirs[j]
            s = np.full(3, r / 3.0)
            col = base + rng.normal(0, 0.02, 3)
            emit(c, identity_q, s, col, rng.uniform(0.75, 0.98), "fruit")

    if not centers:
        scene = Scene.empty()
    else:
        scene = Scene(np.stack(centers), np.stack(rotations),
                      np.stack(scales), np.stack(colors),
                      np.asarray(opacities), np.stack(codes))
    gt = GroundTruth(fruit_count=spec.fruit_count,
                     centers=fruit_centers.reshape(-1, 3))
    return scene, gt
