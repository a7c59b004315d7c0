"""Brute-force descriptor matching with the nearest/second-nearest ratio test."""
from typing import NamedTuple

import numpy as np

from .._jit import njit, pick

RATIO = 0.5
_K = 3  # candidates re-ranked with exact distances


class Matches(NamedTuple):
    index_a: np.ndarray
    index_b: np.ndarray
    distance: np.ndarray

    def __len__(self):
        return len(self.index_a)


def _empty():
    return Matches(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0))


@njit(cache=True)
def _topk_nb(d2, k):
    m, n = d2.shape
    out = np.empty((m, k), dtype=np.int64)
    vals = np.empty(k)
    for r in range(m):
        cnt = 0
        for c in range(n):
            v = d2[r, c]
            if cnt < k:
                pos = cnt
                cnt += 1
            elif v < vals[k - 1]:
                pos = k - 1
            else:
                continue
            # insertion keeps (value, index) ascending; equal values keep lower index first
            while pos > 0 and vals[pos - 1] > v:
                vals[pos] = vals[pos - 1]
                out[r, pos] = out[r, pos - 1]
                pos -= 1
            vals[pos] = v
            out[r, pos] = c
    return out


def _topk_np(d2, k):
    m, n = d2.shape
    if n > k:
        kth = np.partition(d2, k - 1, axis=1)[:, k - 1]
        rows, cols = np.nonzero(d2 <= kth[:, None])
    else:
        rows, cols = np.divmod(np.arange(m * n), n)
    order = np.lexsort((cols, d2[rows, cols], rows))
    rows, cols = rows[order], cols[order]
    # rank of each entry within its row; ties at the cut keep the lowest index
    start = np.searchsorted(rows, np.arange(m))
    rank = np.arange(len(rows)) - start[rows]
    keep = rank < k
    out = np.empty((m, k), dtype=np.int64)
    out[rows[keep], rank[keep]] = cols[keep]
    return out


_topk = pick(_topk_nb, _topk_np)


def approx_sqdist(a, b):
    """Squared distances from the Gram matrix; only used to shortlist candidates."""
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    g = a @ b.T
    return (np.einsum("ij,ij->i", a, a)[:, None] + np.einsum("ij,ij->i", b, b)[None, :]) - 2.0 * g


def ratio_test(da, db, ratio=RATIO, d2=None):
    """Ratio-test matches between two descriptor arrays (all rows eligible).

    Returns ``Matches`` with row indices into ``da`` and ``db``. The nearest
    and second nearest neighbours are found exactly: a Gram-matrix shortlist
    of three candidates is re-ranked with float64 Euclidean distances.
    """
    if not 0 < ratio < 1:
        raise ValueError("ratio must lie in (0, 1)")
    if len(da) == 0 or len(db) < 2:
        return _empty()
    if d2 is None:
        d2 = approx_sqdist(da, db)
    k = min(_K, len(db))
    cand = _topk(np.ascontiguousarray(d2), k)
    a64 = np.asarray(da, dtype=np.float64)
    b64 = np.asarray(db, dtype=np.float64)
    diff = a64[:, None, :] - b64[cand]
    exact = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    rows = np.arange(len(da))[:, None]
    order = np.lexsort((cand, exact), axis=1)
    cand = cand[rows, order]
    exact = exact[rows, order]
    d1, dsec = exact[:, 0], exact[:, 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        keep = (dsec > 0) & (d1 / dsec < ratio)
    ia = np.flatnonzero(keep)
    return Matches(ia, cand[ia, 0], d1[ia])


def match(a, b, ratio: float = RATIO) -> Matches:
    """Match FeatureSet ``a`` against ``b``, using only features with valid anchors.

    Several features of ``a`` may map to the same feature of ``b``; there is no
    mutual-consistency check. Indices refer to positions in the full sets.
    """
    if not 0 < ratio < 1:
        raise ValueError("ratio must lie in (0, 1)")
    va = np.flatnonzero(a.valid)
    vb = np.flatnonzero(b.valid)
    if len(va) == 0 or len(vb) < 2:
        return _empty()
    m = ratio_test(a.descriptors[va], b.descriptors[vb], ratio)
    return Matches(va[m.index_a], vb[m.index_b], m.distance)
