"""Metric-weighted k-means: seeding, Lloyd iterations, single-point flips.

Distances are quadratic forms ``(p - c)^T G (p - c)`` under a d x d SPD
metric ``G``. With ``G = I`` everything reduces to ordinary Euclidean
k-means. Codebooks are plain ``(n, d)`` float arrays and assignments are
``(k,)`` integer arrays; ties always resolve to the lowest centroid index.
"""

from __future__ import annotations

import numpy as np

from . import _kernels as _k
from .rng import XorShift64Star

LLOYD_TOL = 1e-9


def weighted_distance(p, c, G) -> float:
    diff = np.asarray(p, dtype=np.float64) - np.asarray(c, dtype=np.float64)
    return float(diff @ np.asarray(G, dtype=np.float64) @ diff)


def pairwise_distances(points: np.ndarray, centroids: np.ndarray, G: np.ndarray) -> np.ndarray:
    """(k, n) matrix of weighted squared distances."""
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("kni,ij,knj->kn", diff, G, diff)


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    return pts


def assign(points, centroids, G) -> np.ndarray:
    """Index of the nearest centroid for every point (lowest index on ties)."""
    pts = _as_points(points)
    cb = np.asarray(centroids, dtype=np.float64).reshape(-1, pts.shape[1])
    return np.argmin(pairwise_distances(pts, cb, np.asarray(G, dtype=np.float64)), axis=1)


def _cluster_sums(points: np.ndarray, asg: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    counts = np.bincount(asg, minlength=n)
    sums = np.empty((n, points.shape[1]))
    for j in range(points.shape[1]):
        sums[:, j] = np.bincount(asg, weights=points[:, j], minlength=n)
    return sums, counts


def update_centroids(points, asg, n: int, previous=None) -> np.ndarray:
    """Mean of the points assigned to each centroid.

    The mean minimizes the summed quadratic form for any SPD metric, so the
    metric does not enter here. Empty clusters keep their ``previous`` value
    (zeros if none is given); :func:`weighted_kmeans` reseeds them.
    """
    pts = _as_points(points)
    asg = np.asarray(asg, dtype=np.intp)
    sums, counts = _cluster_sums(pts, asg, n)
    out = np.zeros((n, pts.shape[1])) if previous is None else np.array(previous, dtype=np.float64)
    full = counts > 0
    out[full] = sums[full] / counts[full, None]
    return out


def total_loss(points, G, centroids, asg) -> float:
    pts = _as_points(points)
    diff = pts - np.asarray(centroids, dtype=np.float64)[np.asarray(asg, dtype=np.intp)]
    return float(np.einsum("ki,ij,kj->", diff, np.asarray(G, dtype=np.float64), diff))


def kmeanspp_init(points: np.ndarray, G: np.ndarray, n: int, rng: XorShift64Star, init=None) -> np.ndarray:
    """k-means++ seeding under the metric ``G``.

    ``init`` optionally fixes the first rows of the codebook (warm start);
    the remaining rows are drawn by D^2 sampling. When every point already
    coincides with a centroid, extra centroids duplicate uniformly drawn points.
    """
    k, d = points.shape
    C = np.empty((n, d))
    start = 0
    if init is not None:
        init = np.asarray(init, dtype=np.float64).reshape(-1, d)[:n]
        start = init.shape[0]
        C[:start] = init
    if start == 0:
        C[0] = points[rng.randbelow(k)]
        start = 1
    uniforms = np.array([rng.random() for _ in range(n)])
    _k.kmeanspp(points, G, C, start, uniforms)
    return C


def lloyd(points, G, centroids, max_iters: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Alternate nearest-centroid assignment and mean updates from ``centroids``.

    Empty clusters are reseeded at the points farthest from their centroids.
    Stops when an assignment repeats without a reseed, or after ``max_iters``
    rounds; the returned centroids are the means of the returned assignment
    for every nonempty cluster.
    """
    pts = np.ascontiguousarray(_as_points(points))
    C = np.array(centroids, dtype=np.float64, order="C")
    asg, monotone = _k.lloyd(pts, np.ascontiguousarray(G, dtype=np.float64), C, max_iters)
    assert monotone, "Lloyd loss increased"
    return C, asg


def weighted_kmeans(points, G, n: int, seed: int = 0, max_iters: int = 100, init=None):
    """k-means++ seeding followed by Lloyd iterations under metric ``G``.

    Args:
        points: (k, d) array of vectors to cluster.
        G: (d, d) SPD metric.
        n: number of centroids.
        seed: seed for the xorshift64* generator used in seeding.
        max_iters: cap on Lloyd rounds.
        init: optional (m, d) centroids, m <= n, used as the first seeds.

    Returns:
        ``(centroids, assignment)`` with shapes (n, d) and (k,).
    """
    pts = np.ascontiguousarray(_as_points(points))
    G = np.ascontiguousarray(G, dtype=np.float64)
    if pts.shape[0] < 1 or n < 1:
        raise ValueError("need at least one point and one centroid")
    C0 = kmeanspp_init(pts, G, n, XorShift64Star(seed), init=init)
    return lloyd(pts, G, C0, max_iters)


def flip_improve(points, G, centroids, asg, max_passes: int = 10, max_iters: int = 100):
    """Local search by single-point moves between clusters.

    Each pass visits the points in index order and moves a point to the
    centroid with the largest exact drop in total loss (both affected means
    are updated), if the drop is strictly positive. Lloyd iterations then run
    to convergence. Stops after a pass with no move or after ``max_passes``.
    Expects input that already satisfies the Lloyd conditions.
    """
    pts = np.ascontiguousarray(_as_points(points))
    G = np.ascontiguousarray(G, dtype=np.float64)
    C = np.array(centroids, dtype=np.float64, order="C")
    asg = np.array(asg, dtype=np.int64)
    for _ in range(max_passes):
        tol = 1e-12 * max(total_loss(pts, G, C, asg), 1e-300)
        if _k.flip_pass(pts, G, C, asg, tol) == 0:
            break
        C, asg = lloyd(pts, G, C, max_iters)
    return C, asg


def verify_lloyd(points, G, centroids, asg, tol: float = LLOYD_TOL) -> bool:
    """True iff every point sits at a nearest centroid and every nonempty
    centroid is the mean of its cluster, both within ``tol`` (absolute, scaled
    up for large magnitudes)."""
    pts = _as_points(points)
    G = np.asarray(G, dtype=np.float64)
    C = np.asarray(centroids, dtype=np.float64).reshape(-1, pts.shape[1])
    asg = np.asarray(asg, dtype=np.intp)
    if asg.shape != (pts.shape[0],) or np.any(asg < 0) or np.any(asg >= C.shape[0]):
        return False
    D = pairwise_distances(pts, C, G)
    own = D[np.arange(len(asg)), asg]
    best = D.min(axis=1)
    if np.any(own - best > tol * np.maximum(1.0, best)):
        return False
    sums, counts = _cluster_sums(pts, asg, C.shape[0])
    full = counts > 0
    means = sums[full] / counts[full, None]
    return bool(np.all(np.abs(C[full] - means) <= tol * np.maximum(1.0, np.abs(means))))
