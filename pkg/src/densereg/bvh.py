"""Closest-point queries against triangle meshes through a bounding-volume hierarchy."""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

LEAF_SIZE = 4


@numba.njit(cache=True)
def _closest_weights(px, py, pz, ax, ay, az, bx, by, bz, cx, cy, cz):
    # Region tests follow Ericson, Real-Time Collision Detection, 5.1.5.
    abx, aby, abz = bx - ax, by - ay, bz - az
    acx, acy, acz = cx - ax, cy - ay, cz - az
    apx, apy, apz = px - ax, py - ay, pz - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return 1.0, 0.0, 0.0
    bpx, bpy, bpz = px - bx, py - by, pz - bz
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return 0.0, 1.0, 0.0
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        if d1 == d3:  # a == b
            return 1.0, 0.0, 0.0
        v = d1 / (d1 - d3)
        return 1.0 - v, v, 0.0
    cpx, cpy, cpz = px - cx, py - cy, pz - cz
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return 0.0, 0.0, 1.0
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        if d2 == d6:  # a == c
            return 1.0, 0.0, 0.0
        w = d2 / (d2 - d6)
        return 1.0 - w, 0.0, w
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        if (d4 - d3) + (d5 - d6) == 0.0:  # b == c
            return 0.0, 1.0, 0.0
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return 0.0, 1.0 - w, w
    denom = va + vb + vc
    if denom == 0.0:
        # degenerate (zero-area) triangle: fall back to the nearest corner
        da = apx * apx + apy * apy + apz * apz
        db = bpx * bpx + bpy * bpy + bpz * bpz
        dc = cpx * cpx + cpy * cpy + cpz * cpz
        if da <= db and da <= dc:
            return 1.0, 0.0, 0.0
        if db <= dc:
            return 0.0, 1.0, 0.0
        return 0.0, 0.0, 1.0
    v = vb / denom
    w = vc / denom
    return 1.0 - v - w, v, w


@numba.njit(cache=True)
def closest_on_triangle(p, a, b, c):
    """Barycentric weights of the point of triangle ``abc`` closest to ``p``."""
    return _closest_weights(p[0], p[1], p[2], a[0], a[1], a[2], b[0], b[1], b[2],
                            c[0], c[1], c[2])


@dataclass(frozen=True, eq=False)
class BVH:
    lo: np.ndarray  # (n_nodes, 3)
    hi: np.ndarray  # (n_nodes, 3)
    left: np.ndarray  # child index, -1 for leaves
    right: np.ndarray
    start: np.ndarray  # leaf range into ``order``
    count: np.ndarray
    order: np.ndarray  # triangle permutation
    triangles: np.ndarray  # (n_f, 3, 3)


@numba.njit(cache=True)
def _build(tlo, thi, cent, leaf_size):
    n = cent.shape[0]
    cap = 2 * n
    lo = np.empty((cap, 3))
    hi = np.empty((cap, 3))
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    start = np.zeros(cap, dtype=np.int64)
    count = np.zeros(cap, dtype=np.int64)
    order = np.arange(n)
    work = np.empty((cap, 3), dtype=np.int64)  # (node, s, e)
    work[0, 0], work[0, 1], work[0, 2] = 0, 0, n
    top = 1
    used = 1
    while top > 0:
        top -= 1
        nd, s, e = work[top, 0], work[top, 1], work[top, 2]
        for k in range(3):
            lo[nd, k] = np.inf
            hi[nd, k] = -np.inf
        cmin = np.full(3, np.inf)
        cmax = np.full(3, -np.inf)
        for j in range(s, e):
            t = order[j]
            for k in range(3):
                lo[nd, k] = min(lo[nd, k], tlo[t, k])
                hi[nd, k] = max(hi[nd, k], thi[t, k])
                cmin[k] = min(cmin[k], cent[t, k])
                cmax[k] = max(cmax[k], cent[t, k])
        start[nd] = s
        if e - s <= leaf_size:
            count[nd] = e - s
            continue
        axis = int(np.argmax(cmax - cmin))
        ids = order[s:e].copy()
        perm = np.argsort(cent[ids, axis], kind="mergesort")
        order[s:e] = ids[perm]
        mid = (s + e) // 2
        left[nd], right[nd] = used, used + 1
        work[top, 0], work[top, 1], work[top, 2] = used + 1, mid, e
        work[top + 1, 0], work[top + 1, 1], work[top + 1, 2] = used, s, mid
        top += 2
        used += 2
    return lo[:used], hi[:used], left[:used], right[:used], start[:used], count[:used], order


def build(triangles: np.ndarray, leaf_size: int = LEAF_SIZE) -> BVH:
    """Top-down median split along the widest centroid axis."""
    triangles = np.ascontiguousarray(triangles, dtype=np.float64)
    if len(triangles) == 0:
        raise ValueError("cannot build a BVH over an empty mesh")
    parts = _build(triangles.min(axis=1), triangles.max(axis=1), triangles.mean(axis=1),
                   leaf_size)
    return BVH(*parts, triangles)


@numba.njit(cache=True)
def _box_dist2(p, lo, hi):
    d = 0.0
    for k in range(3):
        if p[k] < lo[k]:
            d += (lo[k] - p[k]) ** 2
        elif p[k] > hi[k]:
            d += (p[k] - hi[k]) ** 2
    return d


@numba.njit(cache=True)
def _query(points, lo, hi, left, right, start, count, order, tris):
    m = points.shape[0]
    dist2 = np.empty(m)
    face = np.empty(m, dtype=np.int64)
    bary = np.empty((m, 3))
    stack = np.empty(128, dtype=np.int64)
    for i in range(m):
        p = points[i]
        best = np.inf
        bf = -1
        b0 = b1 = b2 = 0.0
        top = 0
        stack[0] = 0
        top = 1
        while top > 0:
            top -= 1
            nd = stack[top]
            if _box_dist2(p, lo[nd], hi[nd]) > best:
                continue
            if left[nd] < 0:
                for j in range(start[nd], start[nd] + count[nd]):
                    f = order[j]
                    w0, w1, w2 = _closest_weights(
                        p[0], p[1], p[2], tris[f, 0, 0], tris[f, 0, 1], tris[f, 0, 2],
                        tris[f, 1, 0], tris[f, 1, 1], tris[f, 1, 2],
                        tris[f, 2, 0], tris[f, 2, 1], tris[f, 2, 2])
                    d = 0.0
                    for k in range(3):
                        q = w0 * tris[f, 0, k] + w1 * tris[f, 1, k] + w2 * tris[f, 2, k]
                        d += (p[k] - q) ** 2
                    if d < best or (d == best and f < bf):
                        best = d
                        bf = f
                        b0, b1, b2 = w0, w1, w2
            else:
                # visit the nearer child first
                dl = _box_dist2(p, lo[left[nd]], hi[left[nd]])
                dr = _box_dist2(p, lo[right[nd]], hi[right[nd]])
                if dl <= dr:
                    stack[top] = right[nd]
                    stack[top + 1] = left[nd]
                else:
                    stack[top] = left[nd]
                    stack[top + 1] = right[nd]
                top += 2
        dist2[i] = best
        face[i] = bf
        bary[i, 0] = b0
        bary[i, 1] = b1
        bary[i, 2] = b2
    return dist2, face, bary


@dataclass(frozen=True, eq=False)
class ClosestPoints:
    distance: np.ndarray  # (M,)
    face: np.ndarray  # (M,) triangle index
    bary: np.ndarray  # (M, 3) weights of the closest point
    point: np.ndarray  # (M, 3)


def closest_points(bvh: BVH, points) -> ClosestPoints:
    points = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    d2, face, bary = _query(points, bvh.lo, bvh.hi, bvh.left, bvh.right, bvh.start,
                            bvh.count, bvh.order, bvh.triangles)
    tri = bvh.triangles[face]
    q = np.einsum("mk,mkj->mj", bary, tri)
    return ClosestPoints(np.sqrt(d2), face, bary, q)
