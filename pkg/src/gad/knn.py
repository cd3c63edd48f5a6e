"""Exact k-nearest-neighbor graphs in the spatial and feature domains.

Neighbors are ordered by ascending (squared Euclidean distance, index); a
point is never its own neighbor unless ``include_self`` is set. The brute
force scan and the kd-tree compute distances with the same arithmetic, so
their results agree index for index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .tensor import Tensor, gather_rows

LEAF_SIZE = 16


class InsufficientPointsError(ValueError):
    pass


@dataclass(frozen=True)
class KnnGraph:
    indices: np.ndarray  # (N, K) int64
    domain: str
    k: int

    @property
    def n(self) -> int:
        return self.indices.shape[0]


# ---------------------------------------------------------------------------
# kernels


@numba.njit(cache=True)
def _sqdist(a, i, b, j):
    d = 0.0
    for c in range(a.shape[1]):
        t = a[i, c] - b[j, c]
        d += t * t
    return d


@numba.njit(cache=True)
def _insert(dists, idxs, count, k, d, j):
    if count == k:
        if d > dists[k - 1] or (d == dists[k - 1] and j > idxs[k - 1]):
            return count
        pos = k - 1
    else:
        pos = count
        count += 1
    while pos > 0 and (dists[pos - 1] > d or (dists[pos - 1] == d and idxs[pos - 1] > j)):
        dists[pos] = dists[pos - 1]
        idxs[pos] = idxs[pos - 1]
        pos -= 1
    dists[pos] = d
    idxs[pos] = j
    return count


@numba.njit(cache=True)
def _brute_kernel(points, k, include_self):
    n = points.shape[0]
    out = np.empty((n, k), np.int64)
    dists = np.empty(k)
    idxs = np.empty(k, np.int64)
    if points.shape[1] == 3:
        # column layout keeps the xyz inner loop on contiguous memory
        xs = np.ascontiguousarray(points[:, 0])
        ys = np.ascontiguousarray(points[:, 1])
        zs = np.ascontiguousarray(points[:, 2])
        for i in range(n):
            count = 0
            xi, yi, zi = xs[i], ys[i], zs[i]
            for j in range(n):
                if j == i and not include_self:
                    continue
                dx = xi - xs[j]
                dy = yi - ys[j]
                dz = zi - zs[j]
                d = dx * dx + dy * dy + dz * dz
                if count == k and d > dists[k - 1]:
                    continue
                count = _insert(dists, idxs, count, k, d, j)
            out[i, :] = idxs
        return out
    for i in range(n):
        count = 0
        for j in range(n):
            if j == i and not include_self:
                continue
            d = _sqdist(points, i, points, j)
            if count == k and d > dists[k - 1]:
                continue
            count = _insert(dists, idxs, count, k, d, j)
        out[i, :] = idxs
    return out


@numba.njit(cache=True)
def _brute_batch_kernel(points, k, include_self):
    b = points.shape[0]
    out = np.empty((b, points.shape[1], k), np.int64)
    for s in range(b):
        out[s] = _brute_kernel(points[s], k, include_self)
    return out


@numba.njit(cache=True)
def _kd_build(points, leaf_size):
    n, dim = points.shape
    perm = np.arange(n)
    cap = 4 * (n // leaf_size + 2)
    split_dim = np.full(cap, -1, np.int64)
    split_val = np.zeros(cap)
    lo = np.zeros(cap, np.int64)
    hi = np.zeros(cap, np.int64)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    work = np.empty(cap, np.int64)
    top = 0
    nodes = 1
    lo[0] = 0
    hi[0] = n
    work[top] = 0
    top += 1
    while top > 0:
        top -= 1
        node = work[top]
        start = lo[node]
        end = hi[node]
        if end - start <= leaf_size:
            continue
        best = 0
        spread = -1.0
        for d in range(dim):
            mn = np.inf
            mx = -np.inf
            for t in range(start, end):
                v = points[perm[t], d]
                if v < mn:
                    mn = v
                if v > mx:
                    mx = v
            if mx - mn > spread:
                spread = mx - mn
                best = d
        seg = perm[start:end].copy()
        vals = np.empty(end - start)
        for t in range(end - start):
            vals[t] = points[seg[t], best]
        order = np.argsort(vals)
        for t in range(end - start):
            perm[start + t] = seg[order[t]]
        mid = (start + end) // 2
        split_dim[node] = best
        split_val[node] = points[perm[mid], best]
        l = nodes
        r = nodes + 1
        nodes += 2
        lo[l] = start
        hi[l] = mid
        lo[r] = mid
        hi[r] = end
        left[node] = l
        right[node] = r
        work[top] = l
        work[top + 1] = r
        top += 2
    return perm, split_dim[:nodes], split_val[:nodes], lo[:nodes], hi[:nodes], left[:nodes], right[:nodes]


@numba.njit(cache=True)
def _kd_query_self(points, k, include_self, perm, split_dim, split_val, lo, hi, left, right):
    n = points.shape[0]
    out = np.empty((n, k), np.int64)
    dists = np.empty(k)
    idxs = np.empty(k, np.int64)
    stack = np.empty(256, np.int64)
    bounds = np.empty(256)
    for i in range(n):
        count = 0
        stack[0] = 0
        bounds[0] = 0.0
        sp = 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            bound = bounds[sp]
            if count == k and bound > dists[k - 1]:
                continue
            d = split_dim[node]
            if d < 0:
                for t in range(lo[node], hi[node]):
                    j = perm[t]
                    if j == i and not include_self:
                        continue
                    dist = _sqdist(points, i, points, j)
                    if count == k and dist > dists[k - 1]:
                        continue
                    count = _insert(dists, idxs, count, k, dist, j)
                continue
            diff = points[i, d] - split_val[node]
            if diff < 0:
                near = left[node]
                far = right[node]
            else:
                near = right[node]
                far = left[node]
            stack[sp] = far
            bounds[sp] = max(bound, diff * diff)
            stack[sp + 1] = near
            bounds[sp + 1] = bound
            sp += 2
        out[i, :] = idxs
    return out


# ---------------------------------------------------------------------------
# public API


def _as_points(points) -> np.ndarray:
    data = points.data if isinstance(points, Tensor) else points
    return np.ascontiguousarray(data, dtype=np.float64)


def _check_k(n: int, k: int, include_self: bool) -> None:
    available = n if include_self else n - 1
    if k < 1 or k > available:
        raise InsufficientPointsError(f"k={k} needs at least {k + (0 if include_self else 1)} points, got {n}")


class KDTree:
    """Median-split kd-tree over a fixed point set (split on widest axis)."""

    def __init__(self, points, leaf_size: int = LEAF_SIZE):
        self.points = _as_points(points)
        self.leaf_size = leaf_size
        self._tree = _kd_build(self.points, leaf_size)

    @property
    def node_count(self) -> int:
        return len(self._tree[1])

    def self_knn(self, k: int, include_self: bool = False) -> np.ndarray:
        _check_k(len(self.points), k, include_self)
        return _kd_query_self(self.points, k, include_self, *self._tree)


def knn_brute(points, k: int, include_self: bool = False, domain: str = "feature") -> KnnGraph:
    """Exact KNN by scanning all pairs; any dimensionality."""
    pts = _as_points(points)
    _check_k(len(pts), k, include_self)
    return KnnGraph(_brute_kernel(pts, k, include_self), domain, k)


def knn_spatial(points, k: int, include_self: bool = False) -> KnnGraph:
    """Exact KNN over 3-D coordinates through a kd-tree."""
    pts = _as_points(points)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"spatial KNN expects (N, 3) coordinates, got {pts.shape}")
    tree = KDTree(pts)
    return KnnGraph(tree.self_knn(k, include_self), "spatial", k)


def knn_feature(features, k: int, include_self: bool = False) -> KnnGraph:
    return knn_brute(features, k, include_self, domain="feature")


def knn_batch(points, k: int, include_self: bool = False) -> np.ndarray:
    """Brute-force KNN for a (B, N, D) stack of clouds -> (B, N, K) indices."""
    pts = _as_points(points)
    if pts.ndim != 3:
        raise ValueError(f"knn_batch expects (B, N, D), got {pts.shape}")
    _check_k(pts.shape[1], k, include_self)
    return _brute_batch_kernel(pts, k, include_self)


def gather(values: Tensor, graph: KnnGraph | np.ndarray) -> Tensor:
    """Neighbor rows: ``out[i, j] = values[graph.indices[i, j]]``."""
    idx = graph.indices if isinstance(graph, KnnGraph) else graph
    return gather_rows(values, idx)
