"""Exact nearest-neighbour search with a balanced k-d tree.

The tree is implicit: node ``i`` has children ``2i+1`` and ``2i+2``, every
leaf sits at the same depth, and each node owns a contiguous slice of the
permutation ``order``. Ties in distance resolve to the lowest point index so
both backends return identical answers to a brute-force scan.
"""
import math

import numpy as np

from ._jit import njit, pick

LEAF_SIZE = 16


def _node_ranges(n, depth):
    count = 2 ** (depth + 1) - 1
    lo = np.zeros(count, dtype=np.int64)
    hi = np.zeros(count, dtype=np.int64)
    hi[0] = n
    for node in range(2 ** depth - 1):
        mid = lo[node] + (hi[node] - lo[node]) // 2
        lo[2 * node + 1], hi[2 * node + 1] = lo[node], mid
        lo[2 * node + 2], hi[2 * node + 2] = mid, hi[node]
    return lo, hi


# -- build -----------------------------------------------------------------------

@njit(cache=True)
def _select(order, pts, lo, hi, kth, dim):
    # in-place quickselect of order[lo:hi] so that position kth holds its rank
    left, right = lo, hi - 1
    while right > left:
        mid = (left + right) // 2
        pivot = pts[order[mid], dim]
        i, j = left, right
        while i <= j:
            while pts[order[i], dim] < pivot:
                i += 1
            while pts[order[j], dim] > pivot:
                j -= 1
            if i <= j:
                tmp = order[i]
                order[i] = order[j]
                order[j] = tmp
                i += 1
                j -= 1
        if kth <= j:
            right = j
        elif kth >= i:
            left = i
        else:
            break


@njit(cache=True)
def _build_nb(pts, lo, hi, n_internal):
    n, k = pts.shape
    order = np.arange(n)
    count = lo.shape[0]
    split_dim = np.zeros(count, dtype=np.int64)
    split_val = np.zeros(count)
    bmin = np.empty((count, k))
    bmax = np.empty((count, k))
    for node in range(count):
        a, b = lo[node], hi[node]
        for d in range(k):
            mn = np.inf
            mx = -np.inf
            for t in range(a, b):
                v = pts[order[t], d]
                if v < mn:
                    mn = v
                if v > mx:
                    mx = v
            bmin[node, d] = mn
            bmax[node, d] = mx
        if node < n_internal:
            best = 0
            spread = -1.0
            for d in range(k):
                s = bmax[node, d] - bmin[node, d]
                if s > spread:
                    spread = s
                    best = d
            mid = a + (b - a) // 2
            if b > a:
                _select(order, pts, a, b, mid, best)
                split_val[node] = pts[order[mid], best] if mid < b else bmax[node, best]
            split_dim[node] = best
    return order, split_dim, split_val, bmin, bmax


def _build_np(pts, lo, hi, n_internal):
    n, k = pts.shape
    order = np.arange(n)
    count = len(lo)
    split_dim = np.zeros(count, dtype=np.int64)
    split_val = np.zeros(count)
    bmin = np.full((count, k), np.inf)
    bmax = np.full((count, k), -np.inf)
    for node in range(count):
        a, b = lo[node], hi[node]
        if b > a:
            sub = pts[order[a:b]]
            bmin[node] = sub.min(axis=0)
            bmax[node] = sub.max(axis=0)
        if node < n_internal:
            best = int(np.argmax(bmax[node] - bmin[node])) if b > a else 0
            mid = a + (b - a) // 2
            if mid < b:
                part = np.argpartition(pts[order[a:b], best], mid - a, kind="introselect")
                order[a:b] = order[a:b][part]
                split_val[node] = pts[order[mid], best]
            split_dim[node] = best
    return order, split_dim, split_val, bmin, bmax


# -- query -----------------------------------------------------------------------

@njit(cache=True)
def _rect_dist2(q, bmin, bmax, node):
    s = 0.0
    for d in range(q.shape[0]):
        v = q[d]
        if v < bmin[node, d]:
            t = bmin[node, d] - v
            s += t * t
        elif v > bmax[node, d]:
            t = v - bmax[node, d]
            s += t * t
    return s


@njit(cache=True)
def _query_nb(pts, order, lo, hi, split_dim, split_val, bmin, bmax, n_internal, queries):
    m, k = queries.shape
    out_d2 = np.empty(m)
    out_i = np.empty(m, dtype=np.int64)
    stack = np.empty(128, dtype=np.int64)
    for qi in range(m):
        q = queries[qi]
        best = np.inf
        best_i = -1
        top = 0
        stack[0] = 0
        top = 1
        while top > 0:
            top -= 1
            node = stack[top]
            if _rect_dist2(q, bmin, bmax, node) > best:
                continue
            if node >= n_internal:
                for t in range(lo[node], hi[node]):
                    p = order[t]
                    s = 0.0
                    for d in range(k):
                        diff = q[d] - pts[p, d]
                        s += diff * diff
                    if s < best or (s == best and p < best_i):
                        best = s
                        best_i = p
            else:
                if q[split_dim[node]] < split_val[node]:
                    near, far = 2 * node + 1, 2 * node + 2
                else:
                    near, far = 2 * node + 2, 2 * node + 1
                stack[top] = far
                stack[top + 1] = near
                top += 2
        out_d2[qi] = best
        out_i[qi] = best_i
    return out_d2, out_i


def _sqdist(a, b):
    # fixed summation order so both backends agree bit for bit
    s = (a[..., 0] - b[..., 0]) ** 2
    for d in range(1, a.shape[-1]):
        s = s + (a[..., d] - b[..., d]) ** 2
    return s


def _rect_dist2_np(q, bmin, bmax):
    gap = np.maximum(bmin - q, 0.0) + np.maximum(q - bmax, 0.0)
    s = gap[..., 0] ** 2
    for d in range(1, q.shape[-1]):
        s = s + gap[..., d] ** 2
    return s


def _leaf_eval(pts, order, lo, hi, qidx, leaves, queries, leaf_cap):
    # distances from each (query, leaf) pair to every point of the leaf
    offs = np.arange(leaf_cap)
    pos = lo[leaves][:, None] + offs[None, :]
    valid = pos < hi[leaves][:, None]
    pidx = np.where(valid, order[np.minimum(pos, len(order) - 1)], -1)
    d2 = _sqdist(queries[qidx][:, None, :], pts[np.maximum(pidx, 0)])
    d2 = np.where(valid, d2, np.inf)
    return d2, pidx


def _query_np(pts, order, lo, hi, split_dim, split_val, bmin, bmax, n_internal, queries,
              chunk=4096):
    m = len(queries)
    out_d2 = np.empty(m)
    out_i = np.empty(m, dtype=np.int64)
    leaf_cap = int(np.max(hi[n_internal:] - lo[n_internal:])) if len(lo) > n_internal else 1
    for s in range(0, m, chunk):
        q = queries[s:s + chunk]
        nq = len(q)
        ar = np.arange(nq)
        # upper bound from the leaf each query falls into
        node = np.zeros(nq, dtype=np.int64)
        while True:
            internal = node < n_internal
            if not internal.any():
                break
            nd = node[internal]
            right = q[ar[internal], split_dim[nd]] >= split_val[nd]
            node[internal] = 2 * nd + 1 + right
        d2, _ = _leaf_eval(pts, order, lo, hi, ar, node, q, leaf_cap)
        bound = d2.min(axis=1)
        # expand (query, node) pairs level by level, pruning by the bound
        qi = ar.copy()
        nodes = np.zeros(nq, dtype=np.int64)
        while True:
            internal = nodes < n_internal
            if not internal.any():
                break
            qi_in, nd = qi[internal], nodes[internal]
            qi = np.concatenate([qi[~internal], qi_in, qi_in])
            nodes = np.concatenate([nodes[~internal], 2 * nd + 1, 2 * nd + 2])
            keep = _rect_dist2_np(q[qi], bmin[nodes], bmax[nodes]) <= bound[qi]
            qi, nodes = qi[keep], nodes[keep]
        d2, pidx = _leaf_eval(pts, order, lo, hi, qi, nodes, q, leaf_cap)
        qrep = np.repeat(qi, leaf_cap)
        d2, pidx = d2.ravel(), pidx.ravel()
        ok = pidx >= 0
        qrep, d2, pidx = qrep[ok], d2[ok], pidx[ok]
        srt = np.lexsort((pidx, d2, qrep))
        first = np.ones(len(srt), dtype=bool)
        first[1:] = qrep[srt][1:] != qrep[srt][:-1]
        win = srt[first]
        out_d2[s + qrep[win]] = d2[win]
        out_i[s + qrep[win]] = pidx[win]
    return out_d2, out_i


class KDTree:
    """Immutable exact nearest-neighbour index over ``(N, k)`` points."""

    def __init__(self, points, leaf_size=LEAF_SIZE, backend=None):
        pts = np.array(points, dtype=np.float64, order="C", copy=True)
        if pts.ndim != 2 or len(pts) == 0:
            raise ValueError("KDTree needs a non-empty (N, k) array")
        self.points = pts
        self.points.setflags(write=False)
        n = len(pts)
        self.depth = max(0, math.ceil(math.log2(n / leaf_size))) if n > leaf_size else 0
        self.n_internal = 2 ** self.depth - 1
        self.lo, self.hi = _node_ranges(n, self.depth)
        if backend is None:
            build = pick(_build_nb, _build_np)
            self._query = pick(_query_nb, _query_np)
        else:
            build = _build_nb if backend == "numba" else _build_np
            self._query = _query_nb if backend == "numba" else _query_np
        (self.order, self.split_dim, self.split_val,
         self.bmin, self.bmax) = build(pts, self.lo, self.hi, self.n_internal)

    def __len__(self):
        return len(self.points)

    def query(self, queries):
        """Nearest point for each query row: ``(distances, indices)``."""
        q = np.ascontiguousarray(queries, dtype=np.float64)
        single = q.ndim == 1
        q = q.reshape(-1, self.points.shape[1])
        d2, idx = self._query(self.points, self.order, self.lo, self.hi, self.split_dim,
                              self.split_val, self.bmin, self.bmax, self.n_internal, q)
        d = np.sqrt(d2)
        if single:
            return float(d[0]), int(idx[0])
        return d, idx


def brute_force_nn(points, queries):
    """Reference scan used to validate :class:`KDTree`."""
    points = np.asarray(points, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, points.shape[1])
    d_out = np.empty(len(queries))
    i_out = np.empty(len(queries), dtype=np.int64)
    for s in range(0, len(queries), 256):
        d2 = _sqdist(queries[s:s + 256, None, :], points[None, :, :])
        i = np.argmin(d2, axis=1)  # argmin returns the first (lowest) index on ties
        i_out[s:s + 256] = i
        d_out[s:s + 256] = np.sqrt(d2[np.arange(len(i)), i])
    return d_out, i_out
