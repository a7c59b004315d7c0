"""Overlap search between two scan rings and robust rigid estimation.

The pipeline here is: count ratio-test matches for every view pair
(:func:`overlap_matrix`), take the strongest pair (:func:`best_pair`), turn
its matches into 3D point pairs (:func:`correspondences`) and fit a rigid
transform with RANSAC over 4-point Kabsch fits (:func:`ransac_rigid`).
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import FeatureSet, Matches, match, ratio_test
from .features.match import RATIO
from .geom import RigidTransform
from .image import Image, save_pgm

RANSAC_THRESHOLD = 1.0
RANSAC_CONFIDENCE = 0.999
RANSAC_MAX_ITER = 10000
SAMPLE_SIZE = 4
DEGENERATE_EXTENT = 1e-6


class RegistrationError(RuntimeError):
    pass


class NoOverlapError(RegistrationError):
    """The two poses share no matched view pair."""


class DegenerateGeometryError(RegistrationError):
    """Too few or collinear correspondences for a rigid fit."""


class NoConsensusError(DegenerateGeometryError):
    pass


# -- data --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ScanSequence:
    """Views of one pose ordered by turntable angle (degrees)."""

    angles: np.ndarray
    features: tuple
    pose_id: int = 0
    clouds: tuple | None = None

    def __post_init__(self):
        ang = np.array(self.angles, dtype=np.float64).reshape(-1)
        feats = tuple(self.features)
        if len(ang) != len(feats) or len(ang) == 0:
            raise ValueError("a scan sequence needs one feature set per angle")
        if len(ang) > 1:
            steps = np.diff(ang)
            if np.any(steps <= 0):
                raise ValueError("angles must be strictly increasing")
            if np.ptp(steps) > 1e-6:
                raise ValueError("angles must be uniformly spaced")
        ang.setflags(write=False)
        object.__setattr__(self, "angles", ang)
        object.__setattr__(self, "features", feats)
        if self.clouds is not None:
            object.__setattr__(self, "clouds", tuple(self.clouds))

    def __len__(self):
        return len(self.angles)

    @property
    def step(self) -> float:
        return float(self.angles[1] - self.angles[0]) if len(self) > 1 else 360.0


@dataclass(frozen=True, eq=False)
class OverlapMatrix:
    counts: np.ndarray
    angles1: np.ndarray
    angles2: np.ndarray

    def __post_init__(self):
        c = np.array(self.counts, dtype=np.int64)
        if c.ndim != 2 or np.any(c < 0):
            raise ValueError("counts must be a 2-D non-negative grid")
        c.setflags(write=False)
        object.__setattr__(self, "counts", c)

    @property
    def shape(self):
        return self.counts.shape

    def to_csv(self, path):
        lines = [",".join(str(int(v)) for v in row) for row in self.counts]
        Path(path).write_text("\n".join(lines) + "\n")

    def to_pgm(self, path):
        mx = self.counts.max()
        save_pgm(Image(self.counts / mx if mx > 0 else np.zeros(self.counts.shape)), path)


def read_overlap_csv(path) -> np.ndarray:
    rows = [r for r in Path(path).read_text().splitlines() if r.strip()]
    return np.array([[int(v) for v in r.split(",")] for r in rows], dtype=np.int64)


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """3D point pairs: ``p[i]`` (pose 1) is believed to match ``q[i]`` (pose 2)."""

    p: np.ndarray
    q: np.ndarray
    distance: np.ndarray = None
    index_a: np.ndarray = None
    index_b: np.ndarray = None

    def __post_init__(self):
        p = np.array(self.p, dtype=np.float64).reshape(-1, 3)
        q = np.array(self.q, dtype=np.float64).reshape(-1, 3)
        if p.shape != q.shape:
            raise ValueError("p and q must have the same shape")
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
            raise ValueError("correspondence points must be finite")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)
        n = len(p)
        d = np.zeros(n) if self.distance is None else np.asarray(self.distance, dtype=np.float64)
        object.__setattr__(self, "distance", d)
        for name in ("index_a", "index_b"):
            v = getattr(self, name)
            object.__setattr__(self, name, np.full(n, -1, dtype=np.int64) if v is None
                               else np.asarray(v, dtype=np.int64))

    def __len__(self):
        return len(self.p)


@dataclass(frozen=True, eq=False)
class RansacResult:
    transform: RigidTransform
    inliers: np.ndarray
    total_matches: int
    iterations: int
    seed: int | None = None
    model_inliers: int = field(default=0)  # consensus size of the winning sample

    @property
    def inlier_count(self) -> int:
        return len(self.inliers)

    @property
    def inlier_ratio(self) -> float:
        return self.inlier_count / self.total_matches if self.total_matches else 0.0

    def to_dict(self) -> dict:
        d = self.transform.to_dict()
        d.update({
            "inliers": [int(i) for i in self.inliers],
            "total_matches": int(self.total_matches),
            "iterations": int(self.iterations),
            "seed": self.seed,
        })
        return d

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


# -- overlap ---------------------------------------------------------------------

def _row_counts(fa: FeatureSet, seq2: ScanSequence, ratio: float):
    row = np.zeros(len(seq2), dtype=np.int64)
    da = fa.descriptors[fa.valid]
    if len(da) == 0:
        return row
    for j, fb in enumerate(seq2.features):
        db = fb.descriptors[fb.valid]
        row[j] = len(ratio_test(da, db, ratio))
    return row


def overlap_matrix(s1: ScanSequence, s2: ScanSequence, ratio: float = RATIO, jobs: int = 1) -> OverlapMatrix:
    """Ratio-test match counts for every (view of s1, view of s2) pair.

    The ratio test is asymmetric, so ``overlap_matrix(s2, s1)`` is in general
    not the transpose of ``overlap_matrix(s1, s2)``.
    """
    if not 0 < ratio < 1:
        raise ValueError("ratio must lie in (0, 1)")
    if jobs is None or jobs <= 1:
        rows = [_row_counts(fa, s2, ratio) for fa in s1.features]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(lambda fa: _row_counts(fa, s2, ratio), s1.features))
    return OverlapMatrix(np.array(rows).reshape(len(s1), len(s2)), s1.angles, s2.angles)


def best_pair(m) -> tuple:
    """Index of the largest count; ties go to the smallest (i, then j)."""
    counts = m.counts if isinstance(m, OverlapMatrix) else np.asarray(m)
    if counts.size == 0:
        raise ValueError("empty overlap matrix")
    flat = int(np.argmax(counts))  # first maximum in row-major order
    i, j = divmod(flat, counts.shape[1])
    if counts[i, j] <= 0:
        raise NoOverlapError("no feature matches between any pair of views")
    return i, j


def correspondences(a: FeatureSet, b: FeatureSet, ratio: float = RATIO) -> CorrespondenceSet:
    m: Matches = match(a, b, ratio)
    return CorrespondenceSet(a.anchors[m.index_a], b.anchors[m.index_b], m.distance,
                             m.index_a, m.index_b)


def _circ_dist(a, b, n):
    d = np.abs(a - b) % n
    return np.minimum(d, n - d)


def find_peaks(counts, window_deg: float = 20.0, step_deg: float = 5.0,
               min_fraction: float = 0.25, min_count: int = 5):
    """Significant local maxima of a wrap-around overlap grid.

    An entry survives if no entry within ``window_deg`` (Chebyshev distance,
    both axes wrapping at 360 degrees) beats it, equal values going to the
    lower flat index, and it reaches ``max(min_count, min_fraction * max)``.
    Returns ``[(i, j, count), ...]`` strongest first.
    """
    c = np.asarray(counts)
    n1, n2 = c.shape
    w = int(round(window_deg / step_deg))
    floor = max(min_count, min_fraction * c.max())
    peaks = []
    for i, j in zip(*np.nonzero(c >= floor)):
        di = _circ_dist(np.arange(n1), i, n1) <= w
        dj = _circ_dist(np.arange(n2), j, n2) <= w
        win = c[np.ix_(di, dj)]
        rows = np.flatnonzero(di)[:, None] * n2 + np.flatnonzero(dj)[None, :]
        me = i * n2 + j
        beaten = (win > c[i, j]) | ((win == c[i, j]) & (rows < me))
        if not beaten.any():
            peaks.append((int(i), int(j), int(c[i, j])))
    peaks.sort(key=lambda t: (-t[2], t[0], t[1]))
    return peaks


def _half_width_1d(profile, center, step_deg):
    # walk out from the peak until the profile drops below half height, with linear interpolation
    n = len(profile)
    half = profile[center] / 2.0
    ext = []
    for sgn in (1, -1):
        prev = profile[center]
        for k in range(1, n // 2 + 1):
            cur = profile[(center + sgn * k) % n]
            if cur < half:
                ext.append((k - 1) + (prev - half) / (prev - cur))
                break
            prev = cur
        else:
            ext.append(n / 2.0)
    return (ext[0] + ext[1]) * step_deg


def peak_width(counts, i, j, step_deg: float = 5.0) -> float:
    """Full width at half height of a peak, mean of the row and column cuts (degrees)."""
    c = np.asarray(counts, dtype=np.float64)
    return 0.5 * (_half_width_1d(c[i, :], j, step_deg) + _half_width_1d(c[:, j], i, step_deg))


# -- absolute orientation ---------------------------------------------------------

def kabsch(p, q=None) -> RigidTransform:
    """Least-squares rigid transform mapping points ``p`` onto ``q``.

    Accepts two ``(N, 3)`` arrays or a single :class:`CorrespondenceSet`.
    With the cross-covariance ``C = sum (p_i - p_mean)(q_i - q_mean)^T = U S V^T``
    the rotation is ``V diag(1, 1, d) U^T`` with ``d = sign(det(V U^T))`` and the
    translation ``q_mean - R p_mean``.
    """
    if q is None:
        p, q = p.p, p.q
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if len(p) < 3 or p.shape != q.shape:
        raise DegenerateGeometryError(f"kabsch needs >= 3 matched pairs, got {len(p)}")
    pm = p.mean(axis=0)
    qm = q.mean(axis=0)
    c = (p - pm).T @ (q - qm)
    u, s, vt = np.linalg.svd(c)
    if s[0] == 0.0 or s[1] <= 1e-12 * s[0]:
        raise DegenerateGeometryError("correspondences are collinear or coincident")
    v = vt.T
    d = 1.0 if np.linalg.det(v @ u.T) >= 0 else -1.0
    r = v @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(r, qm - r @ pm)


def residuals(t: RigidTransform, p, q) -> np.ndarray:
    return np.linalg.norm(t(p) - q, axis=1)


def _near_collinear(pts) -> bool:
    s = np.linalg.svd(pts - pts.mean(axis=0), compute_uv=False)
    return s[0] == 0.0 or s[1] < DEGENERATE_EXTENT * s[0]


def required_iterations(inlier_ratio: float, confidence: float, sample_size: int = SAMPLE_SIZE) -> float:
    good = inlier_ratio ** sample_size
    if good <= 0.0:
        return math.inf
    if good >= 1.0:
        return 1.0
    return math.ceil(math.log(1.0 - confidence) / math.log(1.0 - good))


def ransac_rigid(p, q=None, threshold: float = RANSAC_THRESHOLD, confidence: float = RANSAC_CONFIDENCE,
                 max_iter: int = RANSAC_MAX_ITER, seed: int | None = 0) -> RansacResult:
    """RANSAC over minimal 4-pair Kabsch fits.

    Pairs with ``||T(p) - q|| < threshold`` are inliers. The winning sample's
    inliers are refit with Kabsch and the inlier set is recomputed once under
    the refit transform.
    """
    if q is None:
        p, q = p.p, p.q
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    n = len(p)
    if n < SAMPLE_SIZE:
        raise DegenerateGeometryError(f"RANSAC needs >= {SAMPLE_SIZE} correspondences, got {n}")
    if not threshold > 0 or not 0 < confidence < 1:
        raise ValueError("threshold must be > 0 and confidence in (0, 1)")
    rng = np.random.default_rng(seed)
    best_t, best_count, best_mask = None, 0, None
    needed = math.inf
    it = 0
    while it < min(needed, max_iter):
        it += 1
        idx = rng.choice(n, SAMPLE_SIZE, replace=False)
        if _near_collinear(p[idx]) or _near_collinear(q[idx]):
            continue
        try:
            t = kabsch(p[idx], q[idx])
        except DegenerateGeometryError:
            continue
        mask = residuals(t, p, q) < threshold
        cnt = int(mask.sum())
        if cnt > best_count:
            best_t, best_count, best_mask = t, cnt, mask
            needed = required_iterations(cnt / n, confidence)
    if best_t is None or best_count == 0:
        raise NoConsensusError("no RANSAC hypothesis gathered any inliers")
    final = best_t
    if best_count >= 3:
        try:
            final = kabsch(p[best_mask], q[best_mask])
        except DegenerateGeometryError:
            final = best_t
    mask = residuals(final, p, q) < threshold
    if not mask.any():
        final, mask = best_t, best_mask
    return RansacResult(final, np.flatnonzero(mask), n, it, seed, best_count)
