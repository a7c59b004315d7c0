"""Trimmed point-to-point ICP.

Each iteration pairs every moving point with its nearest fixed point, keeps
the closest ``trim_fraction`` of the pairs and applies the Kabsch update.

Plain point-to-point ICP converges linearly, and slowly when the surface
nearly slides against itself (a bumpy sphere). With ``accelerate`` on, two
successive updates pointing the same way are extrapolated along their
geometric series. The extrapolated pose is kept only if its trimmed residual
beats the plain update, so the residual stays monotone.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geom import PointCloud, RigidTransform, axis_angle, compose, invert
from .register import DegenerateGeometryError, kabsch
from .spatial import KDTree

SpatialIndex = KDTree


def build_index(cloud: PointCloud) -> KDTree:
    if len(cloud) == 0:
        raise ValueError("cannot index an empty cloud")
    return KDTree(cloud.points)


@dataclass(frozen=True)
class IcpConfig:
    trim_fraction: float = 0.75
    max_iterations: int = 50
    convergence: float = 1e-4  # RMS point movement per iteration
    max_distance: float = math.inf
    subsample: bool = False
    max_points: int = 100_000
    accelerate: bool = True

    def __post_init__(self):
        if not 0 < self.trim_fraction <= 1:
            raise ValueError("trim_fraction must lie in (0, 1]")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.convergence >= 0 or not self.max_distance > 0:
            raise ValueError("convergence must be >= 0 and max_distance > 0")


@dataclass(frozen=True, eq=False)
class IcpResult:
    transform: RigidTransform
    iterations: int
    movement_rmse: float
    residual_rmse: float
    residual_history: tuple = field(default=())
    init: RigidTransform = field(default_factory=RigidTransform.identity)

    @property
    def increment(self) -> RigidTransform:
        """Refinement applied on top of the initial alignment."""
        return compose(self.transform, invert(self.init))

    def to_dict(self) -> dict:
        d = self.transform.to_dict()
        d.update({
            "iterations": int(self.iterations),
            "movement_rmse": float(self.movement_rmse),
            "residual_rmse": float(self.residual_rmse),
        })
        return d

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def _trimmed_pairs(d, max_distance, trim_fraction):
    ok = np.flatnonzero(d <= max_distance)
    keep = int(math.floor(trim_fraction * len(ok)))
    order = np.lexsort((ok, d[ok]))[:keep]
    return ok[order]


def _rms(x) -> float:
    return float(np.sqrt(np.mean(np.square(x))))


def _spread(pts) -> float:
    return _rms(np.linalg.norm(pts - pts.mean(axis=0), axis=1))


def _motion_vector(step: RigidTransform, pts, spread: float) -> np.ndarray:
    """``step`` as (rotation vector * spread, centroid shift), both parts in length units."""
    c = pts.mean(axis=0)
    r = step.rotation
    skew = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    s = np.linalg.norm(skew) / 2.0
    angle = math.atan2(s, (np.trace(r) - 1.0) / 2.0)
    w = skew / (2.0 * s) * angle if s > 1e-15 else skew / 2.0
    return np.concatenate([w * spread, step(c) - c])


def _motion(v: np.ndarray, pts, spread: float) -> RigidTransform:
    """Inverse of :func:`_motion_vector`: rotate about the centroid of ``pts``, then shift."""
    c = pts.mean(axis=0)
    w = v[:3] / spread
    angle = np.linalg.norm(w)
    r = axis_angle(w, math.degrees(angle)) if angle > 0 else np.eye(3)
    return RigidTransform(r, c - r @ c + v[3:])


def _extrapolation(prev, cur, max_angle_deg: float = 10.0, max_factor: float = 25.0):
    """Sum of the remaining geometric series of updates, in units of ``cur``; None if the updates disagree."""
    if prev is None:
        return None
    na, nb = np.linalg.norm(prev), np.linalg.norm(cur)
    if na == 0 or nb == 0 or prev @ cur < math.cos(math.radians(max_angle_deg)) * na * nb or nb >= na:
        return None
    ratio = nb / na
    return min(ratio / (1.0 - ratio), max_factor)


def icp_refine(moving: PointCloud, fixed: PointCloud, init: RigidTransform | None = None,
               cfg: IcpConfig | None = None, index: KDTree | None = None) -> IcpResult:
    """Refine ``init`` so that ``moving`` mapped by the result fits ``fixed``.

    Stops when the RMS movement of the moving points in one iteration drops
    below ``cfg.convergence`` or after ``cfg.max_iterations``. The reported
    ``movement_rmse`` is the RMS displacement of all moving points between
    ``init`` and the final transform.
    """
    cfg = cfg or IcpConfig()
    init = init or RigidTransform.identity()
    if len(moving) == 0 or len(fixed) == 0:
        raise ValueError("ICP needs non-empty clouds")
    tree = index if index is not None else KDTree(fixed.points)
    src = moving.points
    if cfg.subsample and len(src) > cfg.max_points:
        src = src[::int(math.ceil(len(src) / cfg.max_points))]
    target = tree.points

    def pairs(pts):
        d, nn = tree.query(pts)
        kept = _trimmed_pairs(d, cfg.max_distance, cfg.trim_fraction)
        return d, nn, kept, _rms(d[kept]) if len(kept) else math.inf

    t = init
    cur = t(src)
    d, nn, kept, res = pairs(cur)
    history = []
    last = None  # previous plain update as a motion vector, for acceleration
    spread = _spread(src) if cfg.accelerate else 0.0
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        if len(kept) < 3:
            raise DegenerateGeometryError(f"only {len(kept)} ICP pairs after trimming")
        history.append(res)
        step = kabsch(cur[kept], target[nn[kept]])
        t_new = compose(step, t)
        new = t_new(src)
        state = pairs(new)
        if cfg.accelerate:
            v = _motion_vector(step, cur, spread)
            jump = _extrapolation(last, v)
            last = v
            if jump is not None and spread > 0:
                t_acc = compose(_motion(jump * v, new, spread), t_new)
                acc = t_acc(src)
                cand = pairs(acc)
                if cand[3] < state[3]:
                    t_new, new, state, last = t_acc, acc, cand, None
        moved = _rms(np.sqrt(np.sum((new - cur) ** 2, axis=1)))
        t, cur = t_new, new
        d, nn, kept, res = state
        if moved < cfg.convergence:
            break
    residual = res if len(kept) else math.nan
    diff = t(moving.points) - init(moving.points)
    movement = float(np.sqrt(np.mean(np.sum(diff ** 2, axis=1))))
    return IcpResult(t, it, movement, residual, tuple(history), init)
