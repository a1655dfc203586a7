"""Exact 3D convex hull volume via an incremental hull.

Points provably interior to the hull of 26 directional extremes are
discarded up front (the hull is unchanged by this), the rest are inserted
farthest-first; each insertion replaces the faces visible from the new
point with a fan over the horizon edges. Volume is the sum of signed
tetrahedra from an interior reference point."""

from __future__ import annotations

import numpy as np


class DegenerateHullError(ValueError):
    """Raised when the input has no 3D extent (fewer than 4 points, or all
    points collinear/coplanar within tolerance)."""


def _initial_simplex(pts: np.ndarray, eps: float):
    i0 = int(np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))[0])
    d = np.linalg.norm(pts - pts[i0], axis=1)
    i1 = int(np.argmax(d))
    if d[i1] <= eps:
        raise DegenerateHullError("all points coincide")
    axis = (pts[i1] - pts[i0]) / d[i1]
    off = np.cross(pts - pts[i0], axis)
    dist_line = np.linalg.norm(off, axis=1)
    i2 = int(np.argmax(dist_line))
    if dist_line[i2] <= eps:
        raise DegenerateHullError("all points are collinear")
    normal = np.cross(pts[i1] - pts[i0], pts[i2] - pts[i0])
    normal = normal / np.linalg.norm(normal)
    dist_plane = np.abs((pts - pts[i0]) @ normal)
    i3 = int(np.argmax(dist_plane))
    if dist_plane[i3] <= eps:
        raise DegenerateHullError("all points are coplanar")
    return i0, i1, i2, i3


def _oriented(pts, a, b, c, interior, eps):
    """Face (a, b, c) ordered so its normal points away from `interior`;
    returns None for zero-area slivers."""
    n = np.cross(pts[b] - pts[a], pts[c] - pts[a])
    ln = np.linalg.norm(n)
    if ln <= eps * eps:
        return None
    n = n / ln
    off = float(n @ pts[a])
    if n @ interior > off:
        return (a, c, b), -n, float(-n @ pts[a])
    return (a, b, c), n, off


def _hull_faces(pts: np.ndarray, eps: float):
    """Faces of the hull of `pts`: (triangles, unit normals, offsets,
    interior point). Normals point outward; x on the hull boundary has
    normals @ x - offsets <= 0 componentwise up to eps."""
    i0, i1, i2, i3 = _initial_simplex(pts, eps)
    interior = pts[[i0, i1, i2, i3]].mean(axis=0)
    tris = []
    normals = []
    offsets = []
    for tri in ((i0, i1, i2), (i0, i1, i3), (i0, i2, i3), (i1, i2, i3)):
        face = _oriented(pts, *tri, interior, eps)
        if face is None:
            raise DegenerateHullError("initial simplex is degenerate")
        tris.append(face[0])
        normals.append(face[1])
        offsets.append(face[2])
    normals_arr = np.asarray(normals)
    offsets_arr = np.asarray(offsets)

    rest = np.setdiff1d(np.arange(pts.shape[0]),
                        np.asarray([i0, i1, i2, i3]))
    # Farthest-first insertion: once the hull stabilizes, interior points
    # fail the cheap visibility test immediately.
    rest = rest[np.argsort(-np.linalg.norm(pts[rest] - interior, axis=1),
                           kind="stable")]
    for p in rest:
        dist = normals_arr @ pts[p] - offsets_arr
        if dist.max() <= eps:
            continue
        visible = np.where(dist > eps)[0]
        visible_set = set(int(v) for v in visible)
        directed = set()
        for f in visible_set:
            a, b, c = tris[f]
            directed.update(((a, b), (b, c), (c, a)))
        horizon = [(a, b) for (a, b) in directed
                   if (b, a) not in directed]
        keep = [f for f in range(len(tris)) if f not in visible_set]
        tris = [tris[f] for f in keep]
        normals = [normals_arr[f] for f in keep]
        offsets = [offsets_arr[f] for f in keep]
        for a, b in horizon:
            face = _oriented(pts, a, b, int(p), interior, eps)
            if face is None:
                continue
            tris.append(face[0])
            normals.append(face[1])
            offsets.append(face[2])
        normals_arr = np.asarray(normals)
        offsets_arr = np.asarray(offsets)
    return tris, normals_arr, offsets_arr, interior


_DIRECTIONS = np.array([[i, j, k]
                        for i in (-1, 0, 1)
                        for j in (-1, 0, 1)
                        for k in (-1, 0, 1)
                        if (i, j, k) != (0, 0, 0)], dtype=np.float64)


def extreme_point_reduction(pts: np.ndarray, eps: float) -> np.ndarray:
    """Indices with all provably-interior points removed.

    Points strictly inside the hull of the 26 directional extremes cannot
    be hull vertices, so dropping them leaves the hull unchanged.
    """
    n = pts.shape[0]
    extremes = np.unique(np.argmax(pts @ _DIRECTIONS.T, axis=0))
    if extremes.size < 4:
        return np.arange(n)
    try:
        _, normals, offsets, _ = _hull_faces(pts[extremes], eps)
    except DegenerateHullError:
        return np.arange(n)
    inside = np.all(pts @ normals.T - offsets[None, :] < -eps, axis=1)
    inside[extremes] = False
    return np.where(~inside)[0]


def convex_hull_volume(points) -> float:
    """Volume of the convex hull of a 3D point set.

    Raises DegenerateHullError for fewer than 4 points or inputs without
    3D extent (collinear/coplanar).
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected (n, 3) points, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("points contain non-finite values")
    if pts.shape[0] < 4:
        raise DegenerateHullError(
            f"need at least 4 points, got {pts.shape[0]}")
    scale = float(np.max(pts.max(axis=0) - pts.min(axis=0)))
    eps = max(scale, 1e-30) * 1e-10
    survivors = extreme_point_reduction(pts, eps)
    tris, _, _, interior = _hull_faces(pts[survivors], eps)
    p = pts[survivors]
    vol = 0.0
    for a, b, c in tris:
        vol += float(np.linalg.det(np.stack([p[a] - interior,
                                             p[b] - interior,
                                             p[c] - interior])))
    return abs(vol) / 6.0
