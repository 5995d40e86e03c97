"""Compiled inner loops for weighted k-means (numba)."""

import numpy as np
from numba import njit


@njit(cache=True)
def quad(pts, i, C, j, G):
    d = pts.shape[1]
    s = 0.0
    for a in range(d):
        da = pts[i, a] - C[j, a]
        t = 0.0
        for b in range(d):
            t += G[a, b] * (pts[i, b] - C[j, b])
        s += da * t
    return s


@njit(cache=True)
def assign_into(pts, C, G, asg, own):
    """Nearest centroid per point (first minimum wins); returns the total loss."""
    k = pts.shape[0]
    n = C.shape[0]
    total = 0.0
    for i in range(k):
        best = quad(pts, i, C, 0, G)
        arg = 0
        for j in range(1, n):
            v = quad(pts, i, C, j, G)
            if v < best:
                best = v
                arg = j
        asg[i] = arg
        own[i] = best
        total += best
    return total


@njit(cache=True)
def kmeanspp(pts, G, C, start, uniforms):
    """Fill C[start:] by D^2 sampling; C[:start] must already be set (start >= 1).

    ``uniforms[j]`` in [0, 1) drives the choice of centroid j.
    """
    k = pts.shape[0]
    n = C.shape[0]
    D = np.empty(k)
    for i in range(k):
        best = quad(pts, i, C, 0, G)
        for j in range(1, start):
            v = quad(pts, i, C, j, G)
            if v < best:
                best = v
        D[i] = best
    cum = np.empty(k)
    for j in range(start, n):
        acc = 0.0
        for i in range(k):
            acc += D[i]
            cum[i] = acc
        if acc > 0.0:
            target = uniforms[j] * acc
            idx = k - 1
            for i in range(k):
                if cum[i] > target:
                    idx = i
                    break
            while D[idx] <= 0.0 and idx > 0:
                idx -= 1
        else:
            idx = min(int(uniforms[j] * k), k - 1)
        for a in range(pts.shape[1]):
            C[j, a] = pts[idx, a]
        for i in range(k):
            v = quad(pts, i, C, j, G)
            if v < D[i]:
                D[i] = v


@njit(cache=True)
def cluster_means(pts, asg, C, counts):
    n, d = C.shape
    sums = np.zeros((n, d))
    counts[:] = 0
    for i in range(pts.shape[0]):
        c = asg[i]
        counts[c] += 1
        for a in range(d):
            sums[c, a] += pts[i, a]
    for c in range(n):
        if counts[c] > 0:
            for a in range(d):
                C[c, a] = sums[c, a] / counts[c]


@njit(cache=True)
def reseed_empty(pts, G, C, asg, counts):
    """Move each empty centroid onto the farthest point not yet used."""
    k = pts.shape[0]
    dist = np.empty(k)
    for i in range(k):
        dist[i] = quad(pts, i, C, asg[i], G)
    used = np.zeros(k, dtype=np.bool_)
    moved = False
    for c in range(C.shape[0]):
        if counts[c] != 0:
            continue
        best = -1.0
        arg = -1
        for i in range(k):
            if not used[i] and dist[i] > best:
                best = dist[i]
                arg = i
        if arg < 0 or best <= 0.0:
            break
        used[arg] = True
        for a in range(pts.shape[1]):
            C[c, a] = pts[arg, a]
        moved = True
    return moved


@njit(cache=True)
def lloyd(pts, G, C, max_iters):
    """Lloyd iterations in place on C. Returns (assignment, monotone)."""
    k = pts.shape[0]
    n = C.shape[0]
    asg = np.empty(k, dtype=np.int64)
    new = np.empty(k, dtype=np.int64)
    own = np.empty(k)
    counts = np.zeros(n, dtype=np.int64)
    prev = assign_into(pts, C, G, asg, own)
    monotone = True
    for _ in range(max_iters):
        cluster_means(pts, asg, C, counts)
        reseeded = reseed_empty(pts, G, C, asg, counts)
        loss = assign_into(pts, C, G, new, own)
        if loss > prev + 1e-12 * max(1.0, prev):
            monotone = False
        prev = loss
        same = True
        for i in range(k):
            if new[i] != asg[i]:
                same = False
                break
        if same and not reseeded:
            break
        asg[:] = new
    cluster_means(pts, asg, C, counts)
    return asg, monotone


@njit(cache=True)
def flip_pass(pts, G, C, asg, tol):
    """One sweep of single-point moves in index order. Returns the move count.

    Moving p from cluster a (size na > 1) to b (size nb) changes the total
    loss by ``nb/(nb+1) dist(p, c_b) - na/(na-1) dist(p, c_a)``.
    """
    k, d = pts.shape
    n = C.shape[0]
    counts = np.zeros(n, dtype=np.int64)
    sums = np.zeros((n, d))
    for i in range(k):
        counts[asg[i]] += 1
        for a in range(d):
            sums[asg[i], a] += pts[i, a]
    moves = 0
    for i in range(k):
        a = asg[i]
        na = counts[a]
        if na <= 1:
            continue
        gain = na / (na - 1.0) * quad(pts, i, C, a, G)
        best = 0.0
        target = -1
        for b in range(n):
            if b == a:
                continue
            nb = counts[b]
            delta = nb / (nb + 1.0) * quad(pts, i, C, b, G) - gain
            if target < 0 or delta < best:
                best = delta
                target = b
        if target >= 0 and best < -tol:
            b = target
            counts[a] -= 1
            counts[b] += 1
            for c in range(d):
                sums[a, c] -= pts[i, c]
                sums[b, c] += pts[i, c]
                C[a, c] = sums[a, c] / counts[a]
                C[b, c] = sums[b, c] / counts[b]
            asg[i] = b
            moves += 1
    return moves
