"""Exact spherical and k-nearest-neighbour queries over an immutable cloud.

The index is a bucketed kd-tree stored in flat arrays so that the query
routines are plain numba functions; the feature kernels call them directly
from inside their per-core-point loops without returning to Python.

Squared distances are always evaluated as ``(dx*dx + dy*dy) + dz*dz`` with
``dx = p_x - c_x``; box distances use the same association, which keeps the
pruning conservative (never rejects a point that the formula accepts).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np
from numba import njit

LEAF_SIZE = 16


@dataclass(frozen=True)
class Scale:
    """Spherical neighbourhood, identified by its diameter in meters."""

    diameter: float

    def __post_init__(self):
        if not self.diameter > 0:
            raise ValueError("scale diameter must be > 0")

    @property
    def radius(self) -> float:
        return self.diameter / 2.0


@njit(nogil=True, cache=True)
def _build_tree(xyz, leaf_size):
    n = xyz.shape[0]
    perm = np.arange(n)
    cap = 4 * (n // leaf_size) + 4
    start = np.zeros(cap, np.int64)
    end = np.zeros(cap, np.int64)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    lo = np.zeros((cap, 3))
    hi = np.zeros((cap, 3))
    stack = np.zeros(cap, np.int64)
    start[0] = 0
    end[0] = n
    n_nodes = 1
    sp = 1
    stack[0] = 0
    while sp > 0:
        sp -= 1
        node = stack[sp]
        s = start[node]
        e = end[node]
        for d in range(3):
            lo[node, d] = np.inf
            hi[node, d] = -np.inf
        for i in range(s, e):
            p = perm[i]
            for d in range(3):
                v = xyz[p, d]
                if v < lo[node, d]:
                    lo[node, d] = v
                if v > hi[node, d]:
                    hi[node, d] = v
        if e - s <= leaf_size:
            continue
        dim = 0
        spread = hi[node, 0] - lo[node, 0]
        for d in range(1, 3):
            if hi[node, d] - lo[node, d] > spread:
                spread = hi[node, d] - lo[node, d]
                dim = d
        if spread == 0.0:
            continue
        sub = perm[s:e].copy()
        vals = np.empty(e - s)
        for i in range(e - s):
            vals[i] = xyz[sub[i], dim]
        order = np.argsort(vals, kind="mergesort")
        for i in range(e - s):
            perm[s + i] = sub[order[i]]
        mid = (s + e) // 2
        for child, cs, ce in ((n_nodes, s, mid), (n_nodes + 1, mid, e)):
            start[child] = cs
            end[child] = ce
            stack[sp] = child
            sp += 1
        left[node] = n_nodes
        right[node] = n_nodes + 1
        n_nodes += 2
    pts = np.empty((n, 3))
    for i in range(n):
        for d in range(3):
            pts[i, d] = xyz[perm[i], d]
    return (pts, perm, start[:n_nodes].copy(), end[:n_nodes].copy(),
            left[:n_nodes].copy(), right[:n_nodes].copy(),
            lo[:n_nodes].copy(), hi[:n_nodes].copy())


@njit(nogil=True, cache=True)
def box_sqdist(lo, hi, node, cx, cy, cz):
    tx = 0.0
    if cx < lo[node, 0]:
        tx = lo[node, 0] - cx
    elif cx > hi[node, 0]:
        tx = cx - hi[node, 0]
    ty = 0.0
    if cy < lo[node, 1]:
        ty = lo[node, 1] - cy
    elif cy > hi[node, 1]:
        ty = cy - hi[node, 1]
    tz = 0.0
    if cz < lo[node, 2]:
        tz = lo[node, 2] - cz
    elif cz > hi[node, 2]:
        tz = cz - hi[node, 2]
    return tx * tx + ty * ty + tz * tz


@njit(nogil=True, cache=True)
def radius_search(pts, perm, start, end, left, right, lo, hi,
                  cx, cy, cz, r2, out, stack):
    """Fill ``out`` with original indices within ``sqrt(r2)``; ascending order.

    Returns the number of hits. ``out`` must hold the whole cloud in the worst
    case and ``stack`` at least ``len(start)`` entries.
    """
    count = 0
    if pts.shape[0] == 0:
        return 0
    sp = 1
    stack[0] = 0
    while sp > 0:
        sp -= 1
        node = stack[sp]
        if box_sqdist(lo, hi, node, cx, cy, cz) > r2:
            continue
        if left[node] < 0:
            for i in range(start[node], end[node]):
                dx = pts[i, 0] - cx
                dy = pts[i, 1] - cy
                dz = pts[i, 2] - cz
                if dx * dx + dy * dy + dz * dz <= r2:
                    out[count] = perm[i]
                    count += 1
        else:
            stack[sp] = left[node]
            stack[sp + 1] = right[node]
            sp += 2
    out[:count].sort()
    return count


@njit(nogil=True, cache=True)
def knn_search(pts, perm, start, end, left, right, lo, hi,
               cx, cy, cz, k, best_d2, best_idx, stack):
    """k nearest points ordered by (squared distance, original index).

    Results are written to ``best_d2``/``best_idx`` (length >= k); returns the
    number found, which is ``min(k, n)``.
    """
    n = pts.shape[0]
    if n == 0 or k <= 0:
        return 0
    count = 0
    sp = 1
    stack[0] = 0
    while sp > 0:
        sp -= 1
        node = stack[sp]
        if count == k and box_sqdist(lo, hi, node, cx, cy, cz) > best_d2[k - 1]:
            continue
        if left[node] < 0:
            for i in range(start[node], end[node]):
                dx = pts[i, 0] - cx
                dy = pts[i, 1] - cy
                dz = pts[i, 2] - cz
                d2 = dx * dx + dy * dy + dz * dz
                idx = perm[i]
                if count == k:
                    wd = best_d2[k - 1]
                    if d2 > wd or (d2 == wd and idx > best_idx[k - 1]):
                        continue
                    j = k - 1
                else:
                    j = count
                    count += 1
                while j > 0 and (best_d2[j - 1] > d2 or
                                 (best_d2[j - 1] == d2 and best_idx[j - 1] > idx)):
                    best_d2[j] = best_d2[j - 1]
                    best_idx[j] = best_idx[j - 1]
                    j -= 1
                best_d2[j] = d2
                best_idx[j] = idx
        else:
            a = left[node]
            b = right[node]
            da = box_sqdist(lo, hi, a, cx, cy, cz)
            db = box_sqdist(lo, hi, b, cx, cy, cz)
            # nearer child goes on top of the stack
            if da <= db:
                stack[sp] = b
                stack[sp + 1] = a
            else:
                stack[sp] = a
                stack[sp + 1] = b
            sp += 2
    return count


class SpatialIndex:
    """Read-only kd-tree over the coordinates of one cloud.

    Query results are exactly those of a linear scan: radius queries include
    the sphere boundary and return ascending point indices; kNN results are
    sorted by distance with ties going to the lower point index.
    """

    def __init__(self, xyz, leaf_size: int = LEAF_SIZE):
        xyz = np.ascontiguousarray(np.asarray(xyz, dtype=np.float64).reshape(-1, 3))
        if len(xyz) == 0:
            raise ValueError("cannot index an empty cloud")
        self.n = len(xyz)
        self.arrays = _build_tree(xyz, int(leaf_size))
        for a in self.arrays:
            a.flags.writeable = False

    @property
    def n_nodes(self) -> int:
        return len(self.arrays[2])

    def radius_query(self, center, scale: Union[Scale, float]) -> np.ndarray:
        diameter = scale.diameter if isinstance(scale, Scale) else float(scale)
        if not diameter > 0:
            raise ValueError("diameter must be > 0")
        r = diameter / 2.0
        cx, cy, cz = (float(v) for v in center)
        out = np.empty(self.n, np.int64)
        stack = np.empty(self.n_nodes + 1, np.int64)
        m = radius_search(*self.arrays, cx, cy, cz, r * r, out, stack)
        return out[:m].copy()

    def knn_query(self, center, k: int) -> Tuple[np.ndarray, np.ndarray]:
        if k < 1:
            raise ValueError("k must be >= 1")
        cx, cy, cz = (float(v) for v in center)
        kk = min(int(k), self.n)
        d2 = np.empty(kk)
        idx = np.empty(kk, np.int64)
        stack = np.empty(self.n_nodes + 1, np.int64)
        m = knn_search(*self.arrays, cx, cy, cz, kk, d2, idx, stack)
        return idx[:m].copy(), np.sqrt(d2[:m])


def build(cloud, leaf_size: int = LEAF_SIZE) -> SpatialIndex:
    """Index a :class:`~cloudclass.cloud.PointCloud` (or raw ``(n, 3)`` array)."""
    xyz = cloud.xyz if hasattr(cloud, "xyz") else cloud
    return SpatialIndex(xyz, leaf_size)
