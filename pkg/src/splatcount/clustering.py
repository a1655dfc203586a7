"""Shape-constrained instance counting: grid-accelerated DBSCAN, Hausdorff
residuals against a fruit template, k-means++ splitting of compound
clusters, and the per-cluster multiplicity decision table.

DBSCAN determinism: clusters are grown to completion one at a time, seeded
at the smallest-index unvisited core point, so a border point in reach of
several clusters always joins the earliest-discovered one. The uniform
grid (cell size eps, 27-cell lookup) changes nothing about the result; a
brute-force pass produces identical labels."""

from __future__ import annotations

import dataclasses

import numpy as np
from scipy.spatial import cKDTree

from .hull import DegenerateHullError, convex_hull_volume
from .pointcloud import PointCloud

_UNCLAIMED = -1          # not yet owned by any cluster (core or noise)
_CELL_LIMIT = 1 << 20    # grid coordinates must fit the packed key
_PAIR_CHUNK = 2_000_000  # max candidate pairs materialized at once

# Hull volume inside count_instances runs on at most this many points
# (evenly strided); interior-point reduction makes the cap rarely bind.
VOLUME_SAMPLE_CAP = 512


class ClusterError(ValueError):
    """Raised for invalid clustering input."""


@dataclasses.dataclass
class DbscanParams:
    """Density clustering knobs; eps=None derives 0.6 * template radius."""

    eps: float | None = None
    min_samples: int = 20

    def resolved_eps(self, template: "Template | None" = None) -> float:
        if self.eps is not None:
            if self.eps <= 0:
                raise ClusterError("eps must be positive")
            return float(self.eps)
        if template is None:
            raise ClusterError("eps not set and no template to derive it")
        return 0.6 * template.radius

    def validate(self):
        if self.min_samples < 1:
            raise ClusterError("min_samples must be >= 1")
        if self.eps is not None and self.eps <= 0:
            raise ClusterError("eps must be positive")
        return self


@dataclasses.dataclass
class Cluster:
    """One density cluster; indices are ascending positions into the cloud."""

    indices: np.ndarray
    centroid: np.ndarray
    label: str | None = None

    @property
    def count(self) -> int:
        return int(self.indices.size)


def _positions(points) -> np.ndarray:
    if isinstance(points, PointCloud):
        points = points.positions
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ClusterError(f"expected (n, 3) points, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ClusterError("points contain non-finite values")
    return arr


class _Grid:
    """Uniform grid with cell size eps; packs integer cells into int64 keys
    so neighbor-cell lookups are a searchsorted over sorted keys."""

    def __init__(self, points: np.ndarray, eps: float):
        self.points = points
        self.eps = eps
        cells = np.floor(points / eps).astype(np.int64)
        if cells.size and np.abs(cells).max() >= _CELL_LIMIT:
            raise ClusterError("point extent too large relative to eps")
        self.cells = cells
        keys = self._pack(cells)
        self.order = np.argsort(keys, kind="stable")
        sorted_keys = keys[self.order]
        self.ukeys, self.starts, self.counts = np.unique(
            sorted_keys, return_index=True, return_counts=True)
        self.cell_ids = np.searchsorted(self.ukeys, keys)

    @staticmethod
    def _pack(cells: np.ndarray) -> np.ndarray:
        b = _CELL_LIMIT
        return (((cells[:, 0] + b) << 42) + ((cells[:, 1] + b) << 21)
                + (cells[:, 2] + b))

    _OFFSETS = np.array([[i, j, k]
                         for i in (-1, 0, 1)
                         for j in (-1, 0, 1)
                         for k in (-1, 0, 1)], dtype=np.int64)
    # Same cell first, then faces, edges, corners: callers that can stop
    # early get the densest candidates from the cheapest passes.
    _OFFSET_ORDER = np.argsort(np.abs(_OFFSETS).sum(axis=1), kind="stable")

    def for_each_neighbor_chunk(self, query: np.ndarray, visit,
                                offsets=None, candidate_mask=None,
                                cell_available=None):
        """Call visit(q_ids, neighbor_ids) for all pairs within eps of each
        other, in bounded-size chunks. `offsets` restricts the cell-offset
        passes (default all 27); `candidate_mask` drops neighbor ids before
        the distance test, and `cell_available` drops whole candidate cells
        before expansion, for callers interested in a subset only."""
        eps2 = self.eps * self.eps
        qcells = self.cells[query]
        if offsets is None:
            offsets = self._OFFSETS
        for off in offsets:
            nk = self._pack(qcells + off)
            pos = np.searchsorted(self.ukeys, nk)
            pos_c = np.minimum(pos, self.ukeys.size - 1)
            found = np.where(self.ukeys[pos_c] == nk)[0]
            if cell_available is not None and found.size:
                found = found[cell_available[pos_c[found]] > 0]
            if found.size == 0:
                continue
            rep = self.counts[pos_c[found]]
            cum = np.cumsum(rep)
            # Split `found` so each chunk expands to at most _PAIR_CHUNK.
            splits = np.searchsorted(cum, np.arange(_PAIR_CHUNK,
                                                    cum[-1] + _PAIR_CHUNK,
                                                    _PAIR_CHUNK))
            prev = 0
            for stop in splits:
                stop = min(int(stop) + 1, found.size)
                if stop <= prev:
                    continue
                f = found[prev:stop]
                r = rep[prev:stop]
                prev = stop
                total = int(r.sum())
                ql = np.repeat(f, r)
                base = np.repeat(self.starts[pos_c[f]], r)
                within = np.arange(total) - np.repeat(np.cumsum(r) - r, r)
                cand = self.order[base + within]
                qidx = query[ql]
                if candidate_mask is not None:
                    keep = candidate_mask[cand]
                    cand = cand[keep]
                    qidx = qidx[keep]
                    if cand.size == 0:
                        continue
                diff = self.points[qidx] - self.points[cand]
                ok = np.einsum("ij,ij->i", diff, diff) <= eps2
                if np.any(ok):
                    visit(qidx[ok], cand[ok])

    def neighbor_counts(self, query: np.ndarray) -> np.ndarray:
        counts = np.zeros(self.points.shape[0], dtype=np.int64)

        def visit(qidx, _cand):
            np.add.at(counts, qidx, 1)

        self.for_each_neighbor_chunk(query, visit)
        return counts[query]

    def core_mask(self, query: np.ndarray, min_samples: int) -> np.ndarray:
        """Neighbor counting (the point itself included) with early exit:
        query points leave the remaining offset passes once they reach
        min_samples, which skips most of the work in dense regions."""
        counts = np.zeros(self.points.shape[0], dtype=np.int64)

        def visit(qidx, _cand):
            np.add.at(counts, qidx, 1)

        confirmed = np.zeros(self.points.shape[0], dtype=bool)
        active = np.asarray(query, dtype=np.int64)
        for oi in self._OFFSET_ORDER:
            if active.size == 0:
                break
            self.for_each_neighbor_chunk(
                active, visit, offsets=self._OFFSETS[oi][None, :])
            done = counts[active] >= min_samples
            confirmed[active[done]] = True
            active = active[~done]
        return confirmed[query]

    def neighbor_mask(self, query: np.ndarray,
                      eligible: np.ndarray | None = None,
                      cell_available: np.ndarray | None = None
                      ) -> np.ndarray:
        mask = np.zeros(self.points.shape[0], dtype=bool)

        def visit(_qidx, cand):
            mask[cand] = True

        self.for_each_neighbor_chunk(query, visit, candidate_mask=eligible,
                                     cell_available=cell_available)
        return mask

    def any_available(self, query: np.ndarray,
                      available: np.ndarray) -> np.ndarray:
        """Per query point: does any of its 27 neighbor cells have
        available[cell] > 0? A cheap pre-filter that spares pair expansion
        for points whose whole neighborhood is spoken for."""
        out = np.zeros(query.size, dtype=bool)
        qcells = self.cells[query]
        for off in self._OFFSETS:
            nk = self._pack(qcells + off)
            pos = np.searchsorted(self.ukeys, nk)
            pos_c = np.minimum(pos, self.ukeys.size - 1)
            out |= (self.ukeys[pos_c] == nk) & (available[pos_c] > 0)
        return out


def dbscan(points, params: DbscanParams) -> tuple[list, np.ndarray]:
    """Density clustering with distances <= eps inclusive and min_samples
    counting the point itself.

    Returns (clusters, noise indices); clusters are ordered by discovery
    (ascending smallest core index) with ascending member indices.
    """
    params.validate()
    pts = _positions(points)
    eps = params.resolved_eps()
    n = pts.shape[0]
    if n == 0:
        return [], np.zeros(0, dtype=np.int64)
    grid = _Grid(pts, eps)
    all_idx = np.arange(n, dtype=np.int64)
    core = grid.core_mask(all_idx, params.min_samples)

    # labels: cluster id once claimed, _UNCLAIMED before. Non-core points
    # that stay unclaimed are noise. `avail` tracks unclaimed points per
    # grid cell so the BFS can drop frontier points that cannot possibly
    # claim anything new; the labels are unaffected.
    labels = np.full(n, _UNCLAIMED, dtype=np.int64)
    unclaimed = np.ones(n, dtype=bool)
    avail = grid.counts.copy()
    cid = 0
    for seed in np.where(core)[0]:
        if labels[seed] != _UNCLAIMED:
            continue
        labels[seed] = cid
        unclaimed[seed] = False
        avail[grid.cell_ids[seed]] -= 1
        frontier = np.asarray([seed], dtype=np.int64)
        while frontier.size:
            frontier = frontier[grid.any_available(frontier, avail)]
            if frontier.size == 0:
                break
            mask = grid.neighbor_mask(frontier, eligible=unclaimed,
                                      cell_available=avail)
            claim = np.where(mask & unclaimed)[0]
            labels[claim] = cid
            unclaimed[claim] = False
            np.subtract.at(avail, grid.cell_ids[claim], 1)
            frontier = claim[core[claim]]
        cid += 1

    clusters = []
    for c in range(cid):
        idx = np.where(labels == c)[0]
        clusters.append(Cluster(indices=idx, centroid=pts[idx].mean(axis=0)))
    noise = np.where(labels == _UNCLAIMED)[0]
    return clusters, noise


def hausdorff(a, b) -> float:
    """Symmetric Hausdorff distance between two non-empty point sets."""
    pa = _positions(a)
    pb = _positions(b)
    if pa.shape[0] == 0 or pb.shape[0] == 0:
        raise ClusterError("hausdorff requires non-empty point sets")
    d_ab = cKDTree(pb).query(pa)[0].max()
    d_ba = cKDTree(pa).query(pb)[0].max()
    return float(max(d_ab, d_ba))


@dataclasses.dataclass
class Template:
    """Canonical fruit shape: a centered reference cloud with RMS radius 1
    plus the expected world radius."""

    reference: np.ndarray  # (m, 3)
    radius: float

    @property
    def volume(self) -> float:
        return 4.0 / 3.0 * np.pi * self.radius ** 3

    @staticmethod
    def sphere(radius: float, count: int = 500) -> "Template":
        """Deterministic Fibonacci-lattice sphere template."""
        if radius <= 0:
            raise ClusterError("template radius must be positive")
        if count < 4:
            raise ClusterError("template needs at least 4 points")
        i = np.arange(count, dtype=np.float64)
        y = 1.0 - 2.0 * (i + 0.5) / count
        r = np.sqrt(np.maximum(1.0 - y * y, 0.0))
        phi = i * np.pi * (3.0 - np.sqrt(5.0))
        pts = np.stack([r * np.cos(phi), y, r * np.sin(phi)], axis=1)
        return Template.from_points(pts * radius)

    @staticmethod
    def from_points(points) -> "Template":
        """Template from a reference scan: centered, RMS-radius normalized;
        the world radius is the cloud's RMS radius."""
        pts = _positions(points)
        if pts.shape[0] < 4:
            raise ClusterError("template needs at least 4 points")
        centered = pts - pts.mean(axis=0)
        rms = float(np.sqrt(np.mean(np.sum(centered ** 2, axis=1))))
        if rms < 1e-12:
            raise ClusterError("template points are degenerate")
        return Template(reference=centered / rms, radius=rms)

    @staticmethod
    def parse(spec: str) -> "Template":
        """Parse "sphere:<radius>" or a point-cloud PLY path."""
        if spec.startswith("sphere:"):
            return Template.sphere(float(spec.split(":", 1)[1]))
        from .ply import load_cloud_ply

        return Template.from_points(load_cloud_ply(spec).positions)


@dataclasses.dataclass
class AlignResult:
    """Similarity alignment of a cluster onto the template."""

    translation: np.ndarray  # cluster centroid
    scale: float             # cluster RMS radius / template radius
    residual: float          # Hausdorff in the RMS-normalized frame


def _strided(pts: np.ndarray, cap: int) -> np.ndarray:
    if pts.shape[0] <= cap:
        return pts
    idx = np.round(np.linspace(0, pts.shape[0] - 1, cap)).astype(np.int64)
    return pts[idx]


def align_to_template(points, template: Template,
                      downsample: int = 500) -> AlignResult:
    """Centroid + RMS-radius alignment; the residual is the symmetric
    Hausdorff between the normalized cluster (downsampled) and the
    template reference, so it is unitless (a fraction of the radius)."""
    pts = _positions(points)
    if pts.shape[0] == 0:
        raise ClusterError("cannot align an empty cluster")
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    rms = float(np.sqrt(np.mean(np.sum(centered ** 2, axis=1))))
    if rms < 1e-12:
        return AlignResult(translation=centroid, scale=0.0,
                           residual=float("inf"))
    unit = centered / rms
    residual = hausdorff(_strided(unit, downsample), template.reference)
    return AlignResult(translation=centroid,
                       scale=rms / template.radius, residual=residual)


@dataclasses.dataclass
class SplitConfig:
    """Decision-table thresholds for count_instances."""

    volume_ratio: float = 1.5
    hausdorff_tolerance: float = 0.5
    small_fruit_min_points: int = 8
    max_split: int = 6
    downsample_for_hausdorff: int = 500

    def validate(self):
        if self.volume_ratio <= 0 or self.hausdorff_tolerance <= 0:
            raise ClusterError("thresholds must be positive")
        if self.small_fruit_min_points < 4:
            raise ClusterError("small_fruit_min_points must be >= 4")
        if self.max_split < 2:
            raise ClusterError("max_split must be >= 2")
        if self.downsample_for_hausdorff < 4:
            raise ClusterError("downsample_for_hausdorff must be >= 4")
        return self


@dataclasses.dataclass
class VolumeEstimate:
    value: float
    method: str       # "convex_hull" or "voxel"
    degenerate: bool  # True when the hull fell back to voxels


def cluster_volume(points, method: str = "convex_hull",
                   voxel_cell: float | None = None) -> VolumeEstimate:
    """Cluster volume by convex hull, or by occupied-voxel count.

    Degenerate (coplanar/collinear) input makes the hull fall back to the
    voxel estimate with the `degenerate` flag set.
    """
    pts = _positions(points)
    if method not in ("convex_hull", "voxel"):
        raise ClusterError(f"unknown volume method '{method}'")
    if method == "convex_hull":
        try:
            return VolumeEstimate(value=convex_hull_volume(pts),
                                  method="convex_hull", degenerate=False)
        except DegenerateHullError:
            return VolumeEstimate(value=_voxel_volume(pts, voxel_cell),
                                  method="voxel", degenerate=True)
    return VolumeEstimate(value=_voxel_volume(pts, voxel_cell),
                          method="voxel", degenerate=False)


def _voxel_volume(pts: np.ndarray, cell: float | None) -> float:
    if pts.shape[0] == 0:
        return 0.0
    if cell is None:
        diag = float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))
        if diag <= 0:
            return 0.0
        cell = diag / 16.0
    if cell <= 0:
        raise ClusterError("voxel cell size must be positive")
    occupied = np.unique(np.floor(pts / cell).astype(np.int64), axis=0)
    return float(occupied.shape[0]) * cell ** 3


def _capped_hull_volume(pts: np.ndarray, template: Template
                        ) -> VolumeEstimate:
    """Hull volume used by the counter: strided cap for huge clusters,
    voxel fallback at template.radius / 4 for degenerate ones."""
    sample = _strided(pts, VOLUME_SAMPLE_CAP)
    try:
        return VolumeEstimate(value=convex_hull_volume(sample),
                              method="convex_hull", degenerate=False)
    except DegenerateHullError:
        return VolumeEstimate(
            value=_voxel_volume(pts, template.radius / 4.0),
            method="voxel", degenerate=True)


def kmeans(points, k: int, seed: int = 0, iterations: int = 50,
           restarts: int = 5):
    """k-means++ with seeded restarts; the best inertia wins (ties keep the
    earlier restart). Returns (labels, centers, inertia)."""
    pts = _positions(points)
    n = pts.shape[0]
    if not (1 <= k <= n):
        raise ClusterError(f"k must lie in [1, {n}], got {k}")
    best = None
    for r in range(restarts):
        rng = np.random.default_rng([seed, r])
        centers = pts[[int(rng.integers(n))]]
        while centers.shape[0] < k:
            d2 = np.min(((pts[:, None, :] - centers[None, :, :]) ** 2
                         ).sum(axis=2), axis=1)
            total = d2.sum()
            if total <= 0:
                pick = int(rng.integers(n))
            else:
                pick = int(rng.choice(n, p=d2 / total))
            centers = np.vstack([centers, pts[pick]])
        labels = np.zeros(n, dtype=np.int64)
        for _ in range(iterations):
            d2 = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
            new_labels = np.argmin(d2, axis=1)
            for c in range(k):
                sel = new_labels == c
                if np.any(sel):
                    centers[c] = pts[sel].mean(axis=0)
                else:
                    # Reseed an empty cluster at the worst-fit point.
                    worst = int(np.argmax(d2[np.arange(n), new_labels]))
                    centers[c] = pts[worst]
                    new_labels[worst] = c
            if np.array_equal(new_labels, labels):
                labels = new_labels
                break
            labels = new_labels
        d2 = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        inertia = float(d2[np.arange(n), labels].sum())
        if best is None or inertia < best[2]:
            best = (labels.copy(), centers.copy(), inertia)
    return best


def split_cluster(points, template: Template,
                  config: SplitConfig | None = None, seed: int = 0,
                  volume: float | None = None):
    """Partition a compound cluster into k = clamp(round(V / V_T), 2,
    max_split) sub-clusters; sub-clusters below the minimum point count are
    merged into their nearest sibling.

    Returns (list of index arrays into `points`, degenerate flag); a
    degenerate input (all points identical) is kept whole and flagged.
    """
    config = (config or SplitConfig()).validate()
    pts = _positions(points)
    n = pts.shape[0]
    if n == 0:
        raise ClusterError("cannot split an empty cluster")
    if volume is None:
        volume = _capped_hull_volume(pts, template).value
    k = int(np.clip(np.round(volume / template.volume), 2,
                    config.max_split))
    if np.unique(pts, axis=0).shape[0] < k:
        return [np.arange(n, dtype=np.int64)], True
    labels, centers, _ = kmeans(pts, k, seed=seed)
    subs = [np.where(labels == c)[0] for c in range(k)]
    subs = [s for s in subs if s.size]
    # Merge runts into the nearest sibling by centroid distance.
    while len(subs) > 1:
        sizes = np.asarray([s.size for s in subs])
        smallest = int(np.argmin(sizes))
        if sizes[smallest] >= config.small_fruit_min_points:
            break
        cents = np.stack([pts[s].mean(axis=0) for s in subs])
        d = np.linalg.norm(cents - cents[smallest], axis=1)
        d[smallest] = np.inf
        target = int(np.argmin(d))
        merged = np.sort(np.concatenate([subs[smallest], subs[target]]))
        subs = [s for j, s in enumerate(subs)
                if j not in (smallest, target)] + [merged]
    subs.sort(key=lambda s: int(s[0]))
    return subs, False


@dataclasses.dataclass
class ClusterReport:
    """Decision-table outcome for one cluster."""

    label: str          # rejected | single | small_fruit | compound
    gamma: int
    volume: float
    residual: float
    centroid: np.ndarray
    points: int
    degenerate_volume: bool = False

    def to_dict(self) -> dict:
        residual = float(self.residual)
        return {"label": self.label, "gamma": int(self.gamma),
                "volume": float(self.volume),
                "residual": residual if np.isfinite(residual) else None,
                "centroid": [float(x) for x in self.centroid],
                "points": int(self.points)}


@dataclasses.dataclass
class CountResult:
    """Estimated fruit count: the sum of per-cluster multiplicities."""

    total: int
    clusters: list
    params: dict

    def to_dict(self) -> dict:
        return {"total": int(self.total),
                "clusters": [c.to_dict() for c in self.clusters],
                "params": self.params}


def _passes_single(pts: np.ndarray, template: Template,
                   config: SplitConfig) -> bool:
    if pts.shape[0] < config.small_fruit_min_points:
        return False
    vol = _capped_hull_volume(pts, template)
    if vol.value > config.volume_ratio * template.volume:
        return False
    res = align_to_template(pts, template, config.downsample_for_hausdorff)
    return res.residual <= config.hausdorff_tolerance


def count_instances(points, clusters, template: Template,
                    config: SplitConfig | None = None,
                    seed: int = 0) -> CountResult:
    """Apply the multiplicity decision table to each cluster.

    Args:
        points: the cloud the clusters index into.
        clusters: list of Cluster from dbscan.
        template: canonical fruit shape.
        config: thresholds; defaults are the shipped pipeline values.
        seed: k-means seed for compound splitting.

    Returns:
        CountResult; total = sum of gammas.
    """
    config = (config or SplitConfig()).validate()
    pts_all = _positions(points)
    reports = []
    total = 0
    for ci, cluster in enumerate(clusters):
        pts = pts_all[cluster.indices]
        n = pts.shape[0]
        centroid = pts.mean(axis=0) if n else np.zeros(3)
        if n < config.small_fruit_min_points:
            reports.append(ClusterReport(
                label="rejected", gamma=0, volume=0.0,
                residual=float("nan"), centroid=centroid, points=n))
            continue
        vol = _capped_hull_volume(pts, template)
        align = align_to_template(pts, template,
                                  config.downsample_for_hausdorff)
        if vol.value <= config.volume_ratio * template.volume:
            if align.residual <= config.hausdorff_tolerance:
                label, gamma = "single", 1
            else:
                label, gamma = "small_fruit", 1
        else:
            label = "compound"
            subs, degenerate = split_cluster(
                pts, template, config, seed=int(seed) + ci,
                volume=vol.value)
            if degenerate:
                gamma = 2
            else:
                passing = sum(
                    1 for s in subs
                    if _passes_single(pts[s], template, config))
                gamma = max(passing, 2)
        reports.append(ClusterReport(
            label=label, gamma=gamma, volume=vol.value,
            residual=align.residual, centroid=centroid, points=n,
            degenerate_volume=vol.degenerate))
        total += gamma
    params = {"eps": None, "min_samples": None,
              "volume_ratio": config.volume_ratio,
              "hausdorff_tolerance": config.hausdorff_tolerance,
              "small_fruit_min_points": config.small_fruit_min_points,
              "max_split": config.max_split,
              "downsample_for_hausdorff": config.downsample_for_hausdorff,
              "template_radius": template.radius,
              "seed": int(seed)}
    return CountResult(total=total, clusters=reports, params=params)
