"""Tile-based splat rasterizer: EWA projection, opacity-pruned tile binning,
load-balanced tile scheduling, and front-to-back alpha compositing for both
RGB and semantic feature channels.

Conventions fixed here and relied on by the tests:
  - pixel (row r, col c) samples the kernel at continuous coords (x=c, y=r);
  - the screen kernel is hard-truncated at Mahalanobis 3, matching the
    3*sqrt(max eigenvalue) binning radius, so binning never drops a pixel
    with nonzero contribution;
  - a 0.3 px^2 isotropic blur is added to every projected covariance and
    per-sample alpha is clamped to 0.99.
"""

from __future__ import annotations

import dataclasses
from concurrent.futures import ThreadPoolExecutor
import heapq
from typing import Optional

import numpy as np

from .scene import Camera, Scene

LAMBDA_BLUR = 0.3        # px^2, added to both eigenvalues of cov2d
ALPHA_CLAMP = 0.99       # per-sample opacity ceiling
KERNEL_CUTOFF = 3.0      # Mahalanobis truncation radius of the 2D kernel
_DET_EPS = 1e-12


class RenderError(ValueError):
    """Raised for invalid render configuration or camera input."""


@dataclasses.dataclass
class RenderConfig:
    """Rasterizer knobs; defaults match the shipped pipeline."""

    tile_size: int = 16
    prune_threshold: float = 1.0 / 255.0
    transmittance_floor: float = 1e-4
    contribution_cap: Optional[int] = 512
    worker_groups: int = 4
    z_near: float = 0.01

    def validate(self):
        if self.tile_size < 1:
            raise RenderError("tile_size must be >= 1")
        if not (0.0 <= self.prune_threshold <= 1.0):
            raise RenderError("prune_threshold must lie in [0, 1]")
        if not (0.0 < self.transmittance_floor < 1.0):
            raise RenderError("transmittance_floor must lie in (0, 1)")
        if self.contribution_cap is not None and self.contribution_cap < 1:
            raise RenderError("contribution_cap must be >= 1 or None")
        if self.worker_groups < 1:
            raise RenderError("worker_groups must be >= 1")
        if self.z_near <= 0:
            raise RenderError("z_near must be positive")
        return self


@dataclasses.dataclass(frozen=True)
class Projected2D:
    """One splat on the image plane; cov2d includes the 0.3 px^2 blur."""

    u: np.ndarray        # (2,) pixel coordinates
    depth: float         # camera-frame z
    cov2d: np.ndarray    # (2, 2)
    radius: float        # 3 * sqrt(max eigenvalue of cov2d)


@dataclasses.dataclass
class _ProjectedScene:
    valid: np.ndarray     # (n,) bool: in front of camera, invertible cov2d
    uv: np.ndarray        # (n, 2)
    depth: np.ndarray     # (n,)
    cov: np.ndarray       # (n, 3) packed upper triangle (xx, xy, yy)
    inv: np.ndarray       # (n, 3) packed inverse
    radius: np.ndarray    # (n,)
    skipped_singular: int


def _project_arrays(centers, covariances, camera: Camera, z_near: float
                    ) -> _ProjectedScene:
    R, t = camera.rotation, camera.translation
    cam = centers @ R.T + t
    x, y, z = cam[:, 0], cam[:, 1], cam[:, 2]
    valid = z > z_near
    zs = np.where(valid, z, 1.0)

    uv = np.stack([camera.fx * x / zs + camera.cx,
                   camera.fy * y / zs + camera.cy], axis=1)

    # Camera-frame covariance, then the projective Jacobian contraction.
    C = np.einsum("ij,njk,lk->nil", R, covariances, R)
    j00 = camera.fx / zs
    j02 = -camera.fx * x / (zs * zs)
    j11 = camera.fy / zs
    j12 = -camera.fy * y / (zs * zs)
    cxx = C[:, 0, 0]
    cxy = C[:, 0, 1]
    cxz = C[:, 0, 2]
    cyy = C[:, 1, 1]
    cyz = C[:, 1, 2]
    czz = C[:, 2, 2]
    a = j00 * (j00 * cxx + j02 * cxz) + j02 * (j00 * cxz + j02 * czz) \
        + LAMBDA_BLUR
    b = j00 * (j11 * cxy + j12 * cxz) + j02 * (j11 * cyz + j12 * czz)
    c = j11 * (j11 * cyy + j12 * cyz) + j12 * (j11 * cyz + j12 * czz) \
        + LAMBDA_BLUR

    det = a * c - b * b
    singular = valid & (det <= _DET_EPS)
    skipped = int(np.count_nonzero(singular))
    valid = valid & (det > _DET_EPS)

    dets = np.where(det > _DET_EPS, det, 1.0)
    inv = np.stack([c / dets, -b / dets, a / dets], axis=1)

    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = KERNEL_CUTOFF * np.sqrt(np.maximum(lam_max, 0.0))

    return _ProjectedScene(valid=valid, uv=uv, depth=z,
                           cov=np.stack([a, b, c], axis=1), inv=inv,
                           radius=radius, skipped_singular=skipped)


def _project_scene(scene: Scene, camera: Camera, z_near: float
                   ) -> _ProjectedScene:
    return _project_arrays(scene.centers, scene.covariances(), camera, z_near)


def project(camera: Camera, center, cov3d, z_near: float = 0.01
            ) -> Optional[Projected2D]:
    """Project one splat; returns None when it lies behind the camera."""
    center = np.asarray(center, dtype=np.float64).reshape(1, 3)
    cov3d = np.asarray(cov3d, dtype=np.float64).reshape(1, 3, 3)
    if not np.all(np.isfinite(center)) or not np.all(np.isfinite(cov3d)):
        raise RenderError("non-finite projection input")
    p = _project_arrays(center, cov3d, camera, z_near)
    if not p.valid[0]:
        return None
    a, b, c = p.cov[0]
    return Projected2D(u=p.uv[0], depth=float(p.depth[0]),
                       cov2d=np.array([[a, b], [b, c]]),
                       radius=float(p.radius[0]))


@dataclasses.dataclass
class TileBins:
    """Per-tile splat lists, each sorted by (depth, splat index)."""

    tile_size: int
    tiles_x: int
    tiles_y: int
    entries: list  # list of int arrays, one per tile, row-major tile order

    @property
    def tile_count(self) -> int:
        return self.tiles_x * self.tiles_y


@dataclasses.dataclass
class LoadReport:
    """Estimated per-tile compositing cost (bbox/tile overlap in pixels)."""

    tile_size: int
    tiles_x: int
    tiles_y: int
    loads: np.ndarray  # (tiles,) float

    @property
    def total(self) -> float:
        return float(self.loads.sum())

    @property
    def max(self) -> float:
        return float(self.loads.max()) if self.loads.size else 0.0

    def to_dict(self) -> dict:
        return {"tile_size": self.tile_size, "tiles_x": self.tiles_x,
                "tiles_y": self.tiles_y,
                "loads": [float(v) for v in self.loads]}


@dataclasses.dataclass
class Schedule:
    """Static assignment of tiles to worker groups."""

    groups: list           # list of int arrays (tile ids)
    group_loads: np.ndarray
    imbalance_ratio: float

    def to_dict(self) -> dict:
        return {"groups": [[int(t) for t in g] for g in self.groups],
                "group_loads": [float(v) for v in self.group_loads],
                "imbalance_ratio": float(self.imbalance_ratio)}


def _bin_projected(proj: _ProjectedScene, opacities, config: RenderConfig,
                   width: int, height: int) -> tuple[TileBins, LoadReport]:
    ts = config.tile_size
    tiles_x = (width + ts - 1) // ts
    tiles_y = (height + ts - 1) // ts
    n_tiles = tiles_x * tiles_y

    keep = proj.valid & (opacities >= config.prune_threshold)
    idx = np.where(keep)[0]
    loads = np.zeros(n_tiles, dtype=np.float64)
    if idx.size == 0:
        bins = TileBins(ts, tiles_x, tiles_y,
                        [np.empty(0, dtype=np.int64)] * n_tiles)
        return bins, LoadReport(ts, tiles_x, tiles_y, loads)

    u = proj.uv[idx]
    r = proj.radius[idx]
    bx0, bx1 = u[:, 0] - r, u[:, 0] + r
    by0, by1 = u[:, 1] - r, u[:, 1] + r
    tx0 = np.clip(np.floor(bx0 / ts).astype(np.int64), 0, tiles_x - 1)
    tx1 = np.clip(np.floor(bx1 / ts).astype(np.int64), 0, tiles_x - 1)
    ty0 = np.clip(np.floor(by0 / ts).astype(np.int64), 0, tiles_y - 1)
    ty1 = np.clip(np.floor(by1 / ts).astype(np.int64), 0, tiles_y - 1)
    # Splats whose bbox misses the image entirely.
    on_image = (bx1 >= 0) & (bx0 <= width - 1) & (by1 >= 0) \
        & (by0 <= height - 1)

    nx = tx1 - tx0 + 1
    ny = ty1 - ty0 + 1
    cnt = np.where(on_image, nx * ny, 0)
    total = int(cnt.sum())
    if total == 0:
        bins = TileBins(ts, tiles_x, tiles_y,
                        [np.empty(0, dtype=np.int64)] * n_tiles)
        return bins, LoadReport(ts, tiles_x, tiles_y, loads)

    local = np.repeat(np.arange(idx.size), cnt)
    offset = np.arange(total) - np.repeat(np.cumsum(cnt) - cnt, cnt)
    tx = tx0[local] + offset % nx[local]
    ty = ty0[local] + offset // nx[local]

    # Refine: keep a (splat, tile) pair only if the 3-sigma circle reaches
    # the tile's sample rectangle (integer pixel coords).
    rx0 = tx * ts
    rx1 = np.minimum(rx0 + ts - 1, width - 1)
    ry0 = ty * ts
    ry1 = np.minimum(ry0 + ts - 1, height - 1)
    ux = u[local, 0]
    uy = u[local, 1]
    ddx = np.maximum(np.maximum(rx0 - ux, ux - rx1), 0.0)
    ddy = np.maximum(np.maximum(ry0 - uy, uy - ry1), 0.0)
    hit = ddx * ddx + ddy * ddy <= r[local] * r[local]

    local = local[hit]
    tile = (ty[hit] * tiles_x + tx[hit]).astype(np.int64)
    gauss = idx[local]

    # Load estimate: bbox/tile overlap area in pixels, tiles clipped to the
    # image.
    ox = np.minimum(bx1[local], np.minimum((tx[hit] + 1) * ts, width)) \
        - np.maximum(bx0[local], tx[hit] * ts)
    oy = np.minimum(by1[local], np.minimum((ty[hit] + 1) * ts, height)) \
        - np.maximum(by0[local], ty[hit] * ts)
    area = np.maximum(ox, 0.0) * np.maximum(oy, 0.0)
    np.add.at(loads, tile, area)

    order = np.lexsort((gauss, proj.depth[gauss], tile))
    tile_sorted = tile[order]
    gauss_sorted = gauss[order]
    bounds = np.searchsorted(tile_sorted, np.arange(n_tiles + 1))
    entries = [gauss_sorted[bounds[k]:bounds[k + 1]] for k in range(n_tiles)]
    bins = TileBins(ts, tiles_x, tiles_y, entries)
    return bins, LoadReport(ts, tiles_x, tiles_y, loads)


def bin_tiles(scene: Scene, camera: Camera, config: RenderConfig | None = None
              ) -> tuple[TileBins, LoadReport]:
    """Assign splats to the tiles their 3-sigma screen footprint touches,
    dropping splats with opacity below the prune threshold."""
    config = (config or RenderConfig()).validate()
    proj = _project_scene(scene, camera, config.z_near)
    return _bin_projected(proj, scene.opacities, config,
                          camera.width, camera.height)


def schedule_tiles(report: LoadReport, groups: int) -> Schedule:
    """Longest-processing-time assignment of tiles to `groups` workers.

    Greedy LPT keeps the heaviest group within 4/3 of the ideal bound
    max(total/groups, heaviest single tile). Ties break toward the lower
    tile id and the lower group id, so the schedule is deterministic.
    """
    if groups < 1:
        raise RenderError("groups must be >= 1")
    loads = np.asarray(report.loads, dtype=np.float64)
    order = np.argsort(-loads, kind="stable")
    heap = [(0.0, g) for g in range(groups)]
    assigned = [[] for _ in range(groups)]
    group_loads = np.zeros(groups)
    for t in order:
        load, g = heapq.heappop(heap)
        assigned[g].append(int(t))
        group_loads[g] = load + loads[t]
        heapq.heappush(heap, (group_loads[g], g))
    ideal = loads.sum() / groups
    imbalance = float(group_loads.max() / ideal) if ideal > 0 else 1.0
    return Schedule(groups=[np.asarray(g, dtype=np.int64) for g in assigned],
                    group_loads=group_loads, imbalance_ratio=imbalance)


def compositing_weights(alphas) -> tuple[np.ndarray, float]:
    """Front-to-back weights for one pixel: w_i = a_i * prod_{j<i}(1 - a_j).

    Returns (weights, final transmittance); their sum telescopes to 1.
    """
    a = np.asarray(alphas, dtype=np.float64)
    if a.ndim != 1:
        raise RenderError("alphas must be a 1-D sequence")
    if np.any((a < 0) | (a > 1)) or not np.all(np.isfinite(a)):
        raise RenderError("alphas must lie in [0, 1]")
    one_minus = 1.0 - a
    t_before = np.concatenate([[1.0], np.cumprod(one_minus)[:-1]])
    weights = a * t_before
    return weights, float(np.prod(one_minus))


def _composite_block(px, py, uv, inv, alphas, values, eps_t, cap,
                     return_weights=False):
    """Composite K depth-sorted splats over P pixels.

    Args:
        px, py: (P,) pixel sample coordinates.
        uv: (K, 2) splat centers; inv: (K, 3) packed inverse covariances.
        alphas: (K,) splat opacities; values: (K, V) per-splat payload.
        eps_t: stop once transmittance falls below this floor.
        cap: max composited contributions per pixel (None = unlimited).

    Returns:
        (out (P, V), t_final (P,), counts (P,), weights (P, K) or None).
    """
    p = px.shape[0]
    k = uv.shape[0]
    v = values.shape[1]
    if k == 0:
        empty = np.zeros((p, k)) if return_weights else None
        return (np.zeros((p, v)), np.ones(p), np.zeros(p, dtype=np.int32),
                empty)
    dx = px[:, None] - uv[None, :, 0]
    dy = py[:, None] - uv[None, :, 1]
    m = inv[None, :, 0] * dx * dx + 2.0 * inv[None, :, 1] * dx * dy \
        + inv[None, :, 2] * dy * dy
    ahat = alphas[None, :] * np.exp(-0.5 * m)
    ahat[m > KERNEL_CUTOFF * KERNEL_CUTOFF] = 0.0
    np.minimum(ahat, ALPHA_CLAMP, out=ahat)

    contrib = ahat > 0.0
    count_before = np.cumsum(contrib, axis=1) - contrib
    prod = np.cumprod(1.0 - ahat, axis=1)
    t_before = np.concatenate([np.ones((p, 1)), prod[:, :-1]], axis=1)
    # Both stop conditions are monotone along the splat axis, so `active`
    # is a prefix of each pixel's list and the telescoping sum survives.
    active = t_before >= eps_t
    if cap is not None:
        active &= count_before < cap
    weights = ahat * t_before * active
    out = weights @ values
    t_final = np.prod(1.0 - ahat * active, axis=1)
    counts = np.sum(contrib & active, axis=1, dtype=np.int32)
    return out, t_final, counts, (weights if return_weights else None)


@dataclasses.dataclass
class FrameBuffer:
    """RGB render output."""

    color: np.ndarray          # (H, W, 3)
    transmittance: np.ndarray  # (H, W) remaining T after compositing
    contributions: np.ndarray  # (H, W) int32 composited splats per pixel
    skipped_singular: int = 0


@dataclasses.dataclass
class FeatureImage:
    """Semantic feature render output (no background blended in)."""

    features: np.ndarray    # (H, W, C)
    weight_sum: np.ndarray  # (H, W) total compositing weight per pixel
    transmittance: np.ndarray
    contributions: np.ndarray
    skipped_singular: int = 0


def _tile_rect(k, bins: TileBins, width, height):
    ty, tx = divmod(k, bins.tiles_x)
    x0 = tx * bins.tile_size
    y0 = ty * bins.tile_size
    return x0, min(x0 + bins.tile_size, width), y0, \
        min(y0 + bins.tile_size, height)


def _render(scene: Scene, camera: Camera, config: RenderConfig, values,
            threads: int):
    """Shared tile loop; `values` is the (n, V) per-splat payload."""
    proj = _project_scene(scene, camera, config.z_near)
    bins, report = _bin_projected(proj, scene.opacities, config,
                                  camera.width, camera.height)
    h, w = camera.height, camera.width
    nchan = values.shape[1]
    out = np.zeros((h, w, nchan))
    t_final = np.ones((h, w))
    weight_sum = np.zeros((h, w))
    counts = np.zeros((h, w), dtype=np.int32)

    def run_tile(k):
        g = bins.entries[k]
        if g.size == 0:
            return
        x0, x1, y0, y1 = _tile_rect(k, bins, w, h)
        xs = np.arange(x0, x1, dtype=np.float64)
        ys = np.arange(y0, y1, dtype=np.float64)
        px = np.tile(xs, y1 - y0)
        py = np.repeat(ys, x1 - x0)
        block, tf, cnt, wmat = _composite_block(
            px, py, proj.uv[g], proj.inv[g], scene.opacities[g], values[g],
            config.transmittance_floor, config.contribution_cap,
            return_weights=True)
        shape = (y1 - y0, x1 - x0)
        out[y0:y1, x0:x1] = block.reshape(shape + (nchan,))
        t_final[y0:y1, x0:x1] = tf.reshape(shape)
        counts[y0:y1, x0:x1] = cnt.reshape(shape)
        weight_sum[y0:y1, x0:x1] = wmat.sum(axis=1).reshape(shape)

    tiles = range(bins.tile_count)
    if threads > 1:
        schedule = schedule_tiles(report, threads)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(lambda grp: [run_tile(k) for k in grp],
                          schedule.groups))
    else:
        for k in tiles:
            run_tile(k)
    return out, t_final, weight_sum, counts, proj.skipped_singular, report


def render_rgb(scene: Scene, camera: Camera,
               config: RenderConfig | None = None,
               threads: int = 1) -> FrameBuffer:
    """Render the scene's RGB channels over its background color."""
    config = (config or RenderConfig()).validate()
    out, t_final, _, counts, skipped, _ = _render(scene, camera, config,
                                                  scene.colors, threads)
    color = out + t_final[:, :, None] * scene.background_color
    return FrameBuffer(color=color, transmittance=t_final,
                       contributions=counts, skipped_singular=skipped)


def render_features(scene: Scene, camera: Camera, level: str = "w",
                    config: RenderConfig | None = None,
                    threads: int = 1) -> FeatureImage:
    """Render one semantic level's codes; no background is blended in."""
    config = (config or RenderConfig()).validate()
    out, t_final, wsum, counts, skipped, _ = _render(
        scene, camera, config, scene.level_codes(level), threads)
    return FeatureImage(features=out, weight_sum=wsum, transmittance=t_final,
                        contributions=counts, skipped_singular=skipped)


@dataclasses.dataclass
class WeightBlock:
    """Per-tile compositing weights for the feature optimizer: the feature
    image restricted to rows [y0, y1) x cols [x0, x1) equals
    weights @ codes[indices] (pixels row-major)."""

    x0: int
    x1: int
    y0: int
    y1: int
    indices: np.ndarray  # (K,) splat ids
    weights: np.ndarray  # (P, K)


def feature_weight_blocks(scene: Scene, camera: Camera,
                          config: RenderConfig | None = None
                          ) -> tuple[list, np.ndarray]:
    """Precompute compositing weights per tile.

    Features enter compositing linearly, so these blocks are constant while
    codes change; the optimizer reuses them every iteration. Also returns
    each splat's total accumulated weight (zero means the splat is invisible
    from every given pixel).
    """
    config = (config or RenderConfig()).validate()
    proj = _project_scene(scene, camera, config.z_near)
    bins, _ = _bin_projected(proj, scene.opacities, config,
                             camera.width, camera.height)
    h, w = camera.height, camera.width
    totals = np.zeros(len(scene))
    blocks = []
    for k in range(bins.tile_count):
        g = bins.entries[k]
        if g.size == 0:
            continue
        x0, x1, y0, y1 = _tile_rect(k, bins, w, h)
        xs = np.arange(x0, x1, dtype=np.float64)
        ys = np.arange(y0, y1, dtype=np.float64)
        px = np.tile(xs, y1 - y0)
        py = np.repeat(ys, x1 - x0)
        _, _, _, wmat = _composite_block(
            px, py, proj.uv[g], proj.inv[g], scene.opacities[g],
            np.zeros((g.size, 1)), config.transmittance_floor,
            config.contribution_cap, return_weights=True)
        blocks.append(WeightBlock(x0=x0, x1=x1, y0=y0, y1=y1, indices=g,
                                  weights=wmat))
        np.add.at(totals, g, wmat.sum(axis=0))
    return blocks, totals
