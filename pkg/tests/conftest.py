"""Shared fixtures and independent reference implementations.

The oracles here are deliberately written the slow, obvious way (double
loops, exhaustive enumeration) so the fast paths in the package have
something independent to be compared against.
"""

import numpy as np
import pytest

from splatcount.rasterizer import project
from splatcount.scene import Camera, Scene


def make_rng(seed):
    return np.random.default_rng(seed)


def random_unit_quaternions(rng, n):
    q = rng.standard_normal((n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def random_scene(seed, n, spread=1.0, z_offset=5.0, alpha_range=(0.2, 0.95),
                 scale_range=(0.05, 0.25), background=(0.0, 0.0, 0.0)):
    """A valid random scene in front of the default test camera (+z)."""
    rng = make_rng(seed)
    centers = rng.uniform(-spread, spread, (n, 3))
    centers[:, 2] += z_offset
    rotations = random_unit_quaternions(rng, n)
    scales = rng.uniform(*scale_range, (n, 3))
    colors = rng.uniform(0.0, 1.0, (n, 3))
    opacities = rng.uniform(*alpha_range, n)
    codes = rng.uniform(-1.0, 1.0, (n, 3, 3))
    return Scene(centers, rotations, scales, colors, opacities, codes,
                 background_color=background)


def identity_camera(width=64, height=64, f=100.0):
    return Camera(fx=f, fy=f, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                  rotation=np.eye(3), translation=np.zeros(3),
                  width=width, height=height)


@pytest.fixture
def camera64():
    return identity_camera(64, 64)


def naive_render(scene, camera, z_near=0.01, blur=0.3, alpha_clamp=0.99,
                 features=None):
    """All-pairs per-pixel compositing with no tiling or pruning.

    Shares the projection routine but reimplements binning-free
    compositing: every splat is tested at every pixel, depth sorted with
    index tie-break, kernel truncated at Mahalanobis 3, alpha clamped.
    Returns (color or feature image, transmittance).
    """
    h, w = camera.height, camera.width
    n = scene.opacities.shape[0]
    projected = []
    for i in range(n):
        from splatcount.scene import covariance_from

        cov3d = covariance_from(scene.rotations[i], scene.scales[i])
        p = project(camera, scene.centers[i], cov3d, z_near=z_near)
        if p is not None:
            projected.append((p.depth, i, p))
    projected.sort(key=lambda t: (t[0], t[1]))

    channels = 3 if features is None else features.shape[1]
    img = np.zeros((h, w, channels))
    trans = np.ones((h, w))
    for py in range(h):
        for px in range(w):
            t = 1.0
            acc = np.zeros(channels)
            for depth, i, p in projected:
                d = np.array([px, py], dtype=np.float64) - p.u
                m2 = float(d @ np.linalg.inv(p.cov2d) @ d)
                if m2 > 9.0:
                    continue
                a = min(scene.opacities[i] * np.exp(-0.5 * m2), alpha_clamp)
                if features is None:
                    acc += scene.colors[i] * a * t
                else:
                    acc += features[i] * a * t
                t *= 1.0 - a
            if features is None:
                acc += t * scene.background_color
            img[py, px] = acc
            trans[py, px] = t
    return img, trans


def brute_dbscan(points, eps, min_samples):
    """Textbook O(n^2) DBSCAN with ascending-index cluster growth, the
    same border-ownership rule as the shipped implementation."""
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
    nbr = d2 <= eps * eps
    core = nbr.sum(axis=1) >= min_samples
    labels = np.full(n, -1, dtype=np.int64)
    cid = 0
    for seed in np.where(core)[0]:
        if labels[seed] != -1:
            continue
        labels[seed] = cid
        frontier = [seed]
        while frontier:
            reach = np.zeros(n, dtype=bool)
            for f in frontier:
                reach |= nbr[f]
            claim = np.where(reach & (labels == -1))[0]
            labels[claim] = cid
            frontier = list(claim[core[claim]])
        cid += 1
    return labels


def brute_hausdorff(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)
    return max(d.min(axis=1).max(), d.min(axis=0).max())


def brute_hull_volume(points):
    """Exhaustive-facet hull volume for small clouds in general position:
    every point triple whose plane has all remaining points strictly on
    one side is a hull facet; the volume is the sum of signed tetrahedra
    against the centroid."""
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    centroid = pts.mean(axis=0)
    volume = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            for k in range(j + 1, n):
                normal = np.cross(pts[j] - pts[i], pts[k] - pts[i])
                nn = np.linalg.norm(normal)
                if nn < 1e-12:
                    continue
                side = (pts - pts[i]) @ normal
                pos = np.any(side > 1e-10 * nn)
                neg = np.any(side < -1e-10 * nn)
                if pos and neg:
                    continue
                # Orient the facet normal outward before the signed sum.
                if (centroid - pts[i]) @ normal > 0:
                    a, b, c = pts[i], pts[k], pts[j]
                else:
                    a, b, c = pts[i], pts[j], pts[k]
                volume += np.dot(a - centroid,
                                 np.cross(b - centroid, c - centroid)) / 6.0
    return abs(volume)


def allocation_oracle(weights, total):
    """Independent largest-remainder apportionment, ties to lower index."""
    w = np.asarray(weights, dtype=np.float64)
    quota = total * w / w.sum()
    base = np.floor(quota).astype(np.int64)
    remain = total - int(base.sum())
    order = sorted(range(len(w)), key=lambda i: (-(quota[i] - base[i]), i))
    out = base.copy()
    for i in order[:remain]:
        out[i] += 1
    return out


def naive_ssim(a, b, window=11, sigma=1.5, c1=0.01 ** 2, c2=0.03 ** 2):
    """Direct windowed SSIM: explicit Gaussian-weighted moments per valid
    window position, averaged over positions and channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    half = window // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    k1 = np.exp(-0.5 * (x / sigma) ** 2)
    k1 /= k1.sum()
    w = np.outer(k1, k1)
    h, wid, ch = a.shape
    scores = []
    for c in range(ch):
        vals = []
        for i in range(h - window + 1):
            for j in range(wid - window + 1):
                pa = a[i:i + window, j:j + window, c]
                pb = b[i:i + window, j:j + window, c]
                ma = (w * pa).sum()
                mb = (w * pb).sum()
                va = (w * pa * pa).sum() - ma * ma
                vb = (w * pb * pb).sum() - mb * mb
                cov = (w * pa * pb).sum() - ma * mb
                vals.append(((2 * ma * mb + c1) * (2 * cov + c2))
                            / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
        scores.append(np.mean(vals))
    return float(np.mean(scores))
