"""Distribution-aware point sampling from splats and point-cloud hygiene
(statistical outlier removal, PCA normals).

Each splat draws a point budget proportional to sqrt(det(covariance)) *
opacity via largest-remainder apportionment, then samples inside its
Mahalanobis <= k_t ellipsoid from a per-splat RNG stream, so results are
reproducible splat by splat regardless of which subset is sampled."""

from __future__ import annotations

import dataclasses

import numpy as np
from scipy.spatial import cKDTree

from .scene import Scene, quaternions_to_rotations

# Acceptance probability of |z| <= 2 for a standard 3-D normal, used to size
# rejection batches (chi-square, k=3, at 4).
_ACCEPT_AT_K2 = 0.7385


class SampleError(ValueError):
    """Raised for invalid sampling input (e.g. nothing left to sample)."""


@dataclasses.dataclass
class SampleConfig:
    """Sampling knobs; defaults follow the shipped pipeline."""

    target_points: int = 2_100_000
    min_opacity: float = 0.05
    truncation: float = 2.0
    color_quality: str = "ultra"

    def validate(self):
        if self.target_points < 1:
            raise SampleError("target_points must be >= 1")
        if not (0.0 <= self.min_opacity <= 1.0):
            raise SampleError("min_opacity must lie in [0, 1]")
        if self.truncation <= 0:
            raise SampleError("truncation must be positive")
        if self.color_quality not in ("ultra", "high", "medium", "low"):
            raise SampleError(f"unknown color_quality "
                              f"'{self.color_quality}'")
        return self


@dataclasses.dataclass
class PointCloud:
    """Sampled points; `source_index` maps each point to its splat."""

    positions: np.ndarray          # (n, 3)
    colors: np.ndarray             # (n, 3) in [0, 1]
    source_index: np.ndarray       # (n,) int64
    normals: np.ndarray | None = None  # (n, 3) or None

    def __len__(self) -> int:
        return self.positions.shape[0]

    def subset(self, indices) -> "PointCloud":
        idx = np.asarray(indices)
        return PointCloud(
            positions=self.positions[idx], colors=self.colors[idx],
            source_index=self.source_index[idx],
            normals=None if self.normals is None else self.normals[idx])


def allocate_counts(weights, total: int) -> np.ndarray:
    """Largest-remainder apportionment of `total` points.

    Floor quotas first, then one extra point per largest fractional
    remainder (ties to the lower index). The result sums to `total`
    exactly and is monotone in the weights.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1:
        raise SampleError("weights must be 1-D")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise SampleError("weights must be finite and >= 0")
    if total < 0:
        raise SampleError("total must be >= 0")
    wsum = w.sum()
    if wsum <= 0:
        raise SampleError("weights sum to zero; nothing to allocate")
    # normalize before scaling: total/wsum overflows for denormal sums
    quota = total * (w / wsum)
    counts = np.floor(quota).astype(np.int64)
    remainder = quota - counts
    short = total - int(counts.sum())
    if short > 0:
        # Stable argsort on the negated remainder: ties keep ascending index.
        order = np.argsort(-remainder, kind="stable")
        counts[order[:short]] += 1
    return counts


def sampling_weights(scene: Scene) -> np.ndarray:
    """Per-splat weight sqrt(det(cov)) * opacity; the determinant of
    R diag(s^2) R^T is (sx sy sz)^2, so no decomposition is needed."""
    return scene.scales.prod(axis=1) * scene.opacities


def _quantize_colors(colors: np.ndarray, quality: str) -> np.ndarray:
    if quality == "ultra":
        return colors
    # Lower qualities store 5 bits per channel.
    return np.round(colors * 31.0) / 31.0


def _sample_one(rng, count: int, truncation: float):
    """Standard-normal draws with |z| <= truncation, rejection-sampled."""
    out = np.empty((0, 3))
    want = count
    while out.shape[0] < count:
        batch = max(int(np.ceil(want / _ACCEPT_AT_K2 * 1.2)) + 8, 16)
        z = rng.standard_normal((batch, 3))
        keep = np.einsum("ij,ij->i", z, z) <= truncation * truncation
        out = np.vstack([out, z[keep]])
        want = count - out.shape[0]
    return out[:count]


def sample_points(scene: Scene, indices=None,
                  config: SampleConfig | None = None,
                  seed: int = 0) -> PointCloud:
    """Sample a point cloud from (a subset of) the scene.

    Args:
        scene: source splats.
        indices: splat ids to sample from (default: the whole scene).
        config: budget and quality knobs; splats with opacity below
            `min_opacity` are dropped before any allocation.
        seed: root seed; each splat gets the stream (seed, splat id), so
            a splat's points do not depend on which other splats are
            included.

    Returns:
        PointCloud with exactly `config.target_points` points.
    """
    config = (config or SampleConfig()).validate()
    if indices is None:
        indices = np.arange(len(scene), dtype=np.int64)
    else:
        indices = np.asarray(indices, dtype=np.int64)
        if indices.size and (indices.min() < 0
                             or indices.max() >= len(scene)):
            raise SampleError("indices out of range for the scene")
    if indices.size == 0:
        raise SampleError("no splats selected for sampling")

    alive = indices[scene.opacities[indices] >= config.min_opacity]
    if alive.size == 0:
        raise SampleError(
            f"no splats with opacity >= {config.min_opacity} to sample")
    counts = allocate_counts(sampling_weights(scene)[alive],
                             config.target_points)

    rotations = quaternions_to_rotations(scene.rotations[alive])
    positions = []
    colors = []
    source = []
    for j in np.argsort(alive, kind="stable"):  # ascending splat id
        n = int(counts[j])
        if n == 0:
            continue
        gid = int(alive[j])
        rng = np.random.default_rng([seed, gid])
        z = _sample_one(rng, n, config.truncation)
        # x = mu + R diag(s) z, i.e. Mahalanobis(x) = |z|.
        pts = scene.centers[gid] + (z * scene.scales[gid]) @ rotations[j].T
        positions.append(pts)
        colors.append(np.tile(scene.colors[gid], (n, 1)))
        source.append(np.full(n, gid, dtype=np.int64))
    positions = np.vstack(positions) if positions else np.zeros((0, 3))
    colors = np.vstack(colors) if colors else np.zeros((0, 3))
    source = np.concatenate(source) if source \
        else np.zeros(0, dtype=np.int64)
    return PointCloud(positions=positions,
                      colors=_quantize_colors(colors, config.color_quality),
                      source_index=source)


def clean_outliers(pc: PointCloud, k: int = 16,
                   std_ratio: float = 2.0) -> PointCloud:
    """Statistical outlier removal.

    Points whose mean distance to their k nearest neighbors exceeds the
    global mean + std_ratio * stddev are dropped; order is preserved.
    Clouds with at most k points pass through unchanged.
    """
    if k < 1:
        raise SampleError("k must be >= 1")
    n = len(pc)
    if n <= k:
        return pc.subset(np.arange(n))
    tree = cKDTree(pc.positions)
    dists, _ = tree.query(pc.positions, k=k + 1)
    mean_d = dists[:, 1:].mean(axis=1)  # column 0 is the point itself
    threshold = mean_d.mean() + std_ratio * mean_d.std()
    return pc.subset(np.where(mean_d <= threshold)[0])


def estimate_normals(pc: PointCloud, k: int = 16
                     ) -> tuple[np.ndarray, np.ndarray]:
    """PCA normals from each point's k nearest neighbors.

    Returns (normals, invalid): unit normals oriented into the +z
    hemisphere (ties broken toward +y, then +x); neighborhoods of rank < 2
    are flagged invalid with NaN normals.
    """
    if k < 3:
        raise SampleError("k must be >= 3 for a plane fit")
    n = len(pc)
    if n < k + 1:
        raise SampleError(f"need at least {k + 1} points for k={k} normals")
    tree = cKDTree(pc.positions)
    _, nbr = tree.query(pc.positions, k=k + 1)
    neigh = pc.positions[nbr[:, 1:]]              # (n, k, 3), self excluded
    centered = neigh - neigh.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    eigvals, eigvecs = np.linalg.eigh(cov)        # ascending eigenvalues
    normals = eigvecs[:, :, 0]
    invalid = eigvals[:, 1] <= np.maximum(eigvals[:, 2] * 1e-8, 1e-18)

    # Orient into the +z hemisphere; break exact ties toward +y then +x.
    flip = normals[:, 2] < 0
    on_xy = normals[:, 2] == 0
    flip |= on_xy & (normals[:, 1] < 0)
    flip |= on_xy & (normals[:, 1] == 0) & (normals[:, 0] < 0)
    normals = np.where(flip[:, None], -normals, normals)
    normals[invalid] = np.nan
    return normals, invalid
