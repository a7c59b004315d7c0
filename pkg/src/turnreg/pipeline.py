"""End-to-end alignment of turntable scan poses.

A pose directory holds ``view###.pgm`` / ``view###.ply`` / ``view###.json``
(image, part-scan, camera) per turntable angle and optionally ``cloud.ply``,
the merged pose cloud. Stages: detect and lift features per view, build the
overlap matrix, take its best pair, estimate the transform with RANSAC and
refine it with trimmed ICP.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from ._jit import backend_name
from .features import FeatureFileError, FeatureSet, extract, load_features, save_features
from .geom import PinholeCamera, PointCloud, RigidTransform, apply, concatenate, invert
from .icp import IcpConfig, IcpResult, build_index, icp_refine
from .image import PgmError, decode_pgm
from .ply import PlyError, decode_ply, read_ply
from .register import (SAMPLE_SIZE, NoConsensusError, NoOverlapError, RegistrationError, ScanSequence, best_pair,
                       correspondences, find_peaks, overlap_matrix, ransac_rigid)

CACHE_DIRNAME = ".turnreg-cache"
IMAGE_NAMES = ("{stem}.pgm", "{stem}_left.pgm", "{stem}_0.pgm")


class DatasetError(OSError):
    """Unreadable or malformed input, with the offending path in the message."""


# -- configuration -----------------------------------------------------------------

def _default_jobs() -> int:
    return os.cpu_count() or 1


@dataclass(frozen=True)
class RunConfig:
    ratio: float = 0.5
    max_features: int = 1000
    lift_radius: float = 2.0
    ransac_threshold: float = 1.0
    ransac_confidence: float = 0.999
    ransac_max_iter: int = 10000
    seed: int = 0
    min_inliers: int = 5  # smaller RANSAC consensus on the best pair means the poses do not overlap
    icp: IcpConfig = field(default_factory=IcpConfig)
    skip_icp: bool = False
    jobs: int = field(default_factory=_default_jobs)
    cache: bool = True
    cache_dir: str | None = None

    def __post_init__(self):
        if not 0 < self.ratio < 1:
            raise ValueError("ratio must lie in (0, 1)")
        if self.max_features < 1 or self.jobs < 1 or self.ransac_max_iter < 1:
            raise ValueError("max_features, jobs and ransac_max_iter must be >= 1")
        if self.min_inliers < SAMPLE_SIZE:
            raise ValueError(f"min_inliers must be >= {SAMPLE_SIZE}")
        if not self.lift_radius > 0 or not self.ransac_threshold > 0:
            raise ValueError("lift_radius and ransac_threshold must be positive")

    def to_dict(self) -> dict:
        """Flat key/value view; ICP fields carry an ``icp_`` prefix."""
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "icp"}
        for f in dataclasses.fields(IcpConfig):
            d["icp_" + f.name] = getattr(self.icp, f.name)
        return d

    @classmethod
    def from_dict(cls, d: dict, base: RunConfig | None = None) -> RunConfig:
        base = base or cls()
        flat = base.to_dict()
        unknown = set(d) - set(flat)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        flat.update({k: _coerce(flat[k], v, k) for k, v in d.items()})
        icp = IcpConfig(**{k[4:]: flat.pop(k) for k in list(flat) if k.startswith("icp_")})
        return cls(icp=icp, **flat)

    def replace(self, **overrides) -> RunConfig:
        return RunConfig.from_dict({k: v for k, v in overrides.items() if v is not None}, self)


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}
_FIELD_TYPES.update({"icp_" + f.name: f.type for f in dataclasses.fields(IcpConfig)})


def _coerce(current, value, key):
    kind = _FIELD_TYPES[key]
    if not isinstance(value, str):
        return value
    v = value.strip()
    if kind == "bool":
        if v.lower() in ("1", "true", "yes", "on"):
            return True
        if v.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {value!r}")
    if kind == "int":
        return int(v)
    if kind == "float":
        return float(v)
    if v.lower() in ("", "none"):
        return None
    return v


def load_config(path) -> dict:
    """Read a ``key = value`` file (``#`` comments) into a dict of strings."""
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DatasetError(f"{path}: {exc.strerror or exc}") from exc
    try:
        parser.read_string("[run]\n" + text)
    except configparser.Error as exc:
        raise ValueError(f"{path}: {exc}") from None
    return dict(parser["run"])


# -- dataset ingestion -------------------------------------------------------------

@dataclass(frozen=True)
class ViewFiles:
    index: int
    image: Path
    cloud: Path
    camera: Path


def list_views(pose_dir) -> list[ViewFiles]:
    """Views of a pose directory, ordered by index."""
    d = Path(pose_dir)
    if not d.is_dir():
        raise DatasetError(f"{d}: not a directory")
    views = []
    for cam in sorted(d.glob("view[0-9][0-9][0-9].json")):
        stem = cam.stem
        image = next((d / n.format(stem=stem) for n in IMAGE_NAMES if (d / n.format(stem=stem)).exists()), None)
        if image is None:
            raise DatasetError(f"{d / (stem + '.pgm')}: missing image for {cam.name}")
        cloud = d / f"{stem}.ply"
        if not cloud.exists():
            raise DatasetError(f"{cloud}: missing part-scan for {cam.name}")
        views.append(ViewFiles(int(stem[4:]), image, cloud, cam))
    if not views:
        raise DatasetError(f"{d}: no view###.json files")
    return views


def _read(path: Path) -> bytes:
    try:
        return path.read_bytes()
    except OSError as exc:
        raise DatasetError(f"{path}: {exc.strerror or exc}") from exc


def _parse_camera(buf: bytes, path: Path):
    try:
        d = json.loads(buf)
        return PinholeCamera.from_dict(d), d
    except (ValueError, KeyError, TypeError) as exc:
        raise DatasetError(f"{path}: bad camera file: {exc}") from None


def _view_angles(cams: list[dict], n: int) -> np.ndarray:
    if all("angle_deg" in c for c in cams):
        return np.array([float(c["angle_deg"]) for c in cams])
    return np.arange(n) * (360.0 / n)


def _feature_key(img: bytes, cam: bytes, cloud: bytes, cfg: RunConfig) -> str:
    h = hashlib.sha256()
    for part in (img, cam, cloud):
        h.update(len(part).to_bytes(8, "little"))
        h.update(part)
    h.update(f"{__version__}|{cfg.max_features}|{cfg.lift_radius!r}".encode())
    return h.hexdigest()


def _extract_view(v: ViewFiles, pose_id: int, cfg: RunConfig, cache_dir: Path | None):
    img_b, cam_b, ply_b = _read(v.image), _read(v.camera), _read(v.cloud)
    cam, cam_d = _parse_camera(cam_b, v.camera)
    cached = None
    if cache_dir is not None:
        cached = cache_dir / (_feature_key(img_b, cam_b, ply_b, cfg) + ".safe")
        if cached.exists():
            try:
                fs = load_features(cached)
                return (FeatureSet(fs.keypoints, fs.descriptors, fs.anchors, fs.valid, pose_id, v.index),
                        cam_d, True)
            except (FeatureFileError, OSError):
                pass  # stale or corrupt entry: recompute
    try:
        image = decode_pgm(img_b)
    except PgmError as exc:
        raise DatasetError(f"{v.image}: {exc}") from None
    try:
        cloud = decode_ply(ply_b)
    except (PlyError, ValueError) as exc:
        raise DatasetError(f"{v.cloud}: {exc}") from None
    fs = extract(image, cloud, cam, max_features=cfg.max_features, radius=cfg.lift_radius,
                 pose_id=pose_id, view_index=v.index)
    if cached is not None:
        try:
            cache_dir.mkdir(parents=True, exist_ok=True)
            tmp = cached.with_suffix(f".{os.getpid()}.tmp")
            save_features(fs, tmp)
            tmp.replace(cached)
        except OSError:
            pass  # caching is best effort
    return fs, cam_d, False


@dataclass(frozen=True, eq=False)
class PoseData:
    directory: Path
    sequence: ScanSequence
    views: list
    cache_hits: int


def load_pose(pose_dir, pose_id: int, cfg: RunConfig) -> PoseData:
    """Detect and lift the features of every view of a pose directory."""
    d = Path(pose_dir)
    views = list_views(d)
    cache_dir = None
    if cfg.cache:
        cache_dir = Path(cfg.cache_dir) if cfg.cache_dir else d / CACHE_DIRNAME

    def work(v):
        return _extract_view(v, pose_id, cfg, cache_dir)

    if cfg.jobs > 1:
        with ThreadPoolExecutor(cfg.jobs) as ex:
            out = list(ex.map(work, views))
    else:
        out = [work(v) for v in views]
    feats = [o[0] for o in out]
    angles = _view_angles([o[1] for o in out], len(views))
    try:
        seq = ScanSequence(angles, feats, pose_id=pose_id)
    except ValueError as exc:
        raise DatasetError(f"{d}: {exc}") from None
    return PoseData(d, seq, views, sum(o[2] for o in out))


def load_pose_cloud(pose_dir) -> PointCloud:
    """The merged pose cloud: ``cloud.ply`` if present, else the de-duplicated union of part-scans."""
    d = Path(pose_dir)
    merged = d / "cloud.ply"
    paths = [merged] if merged.exists() else [v.cloud for v in list_views(d)]
    clouds = []
    for p in paths:
        try:
            clouds.append(read_ply(p))
        except OSError as exc:
            raise DatasetError(f"{p}: {exc.strerror or exc}") from exc
        except (PlyError, ValueError) as exc:
            raise DatasetError(f"{p}: {exc}") from None
    if len(clouds) == 1:
        return clouds[0]
    pts = concatenate(clouds).points
    # part-scans of one pose repeat shared points exactly; keep first occurrences in order
    _, first = np.unique(pts, axis=0, return_index=True)
    return PointCloud(pts[np.sort(first)])


# -- reports ---------------------------------------------------------------------

@dataclass
class RunReport:
    """Everything needed to reproduce and audit a run. Only ``timing`` varies between identical runs."""

    inputs: dict
    config: dict
    best_pair: dict
    peaks: list
    ransac: dict
    icp: dict | None
    transform: dict
    version: str = __version__
    backend: str = field(default_factory=backend_name)
    timing: dict = field(default_factory=dict)
    links: list | None = None

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if d["links"] is None:
            del d["links"]
        return d

    def to_json(self) -> str:
        return json.dumps(_plain(self.to_dict()), indent=2, sort_keys=True) + "\n"

    def save(self, path):
        Path(path).write_text(self.to_json())


def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, float) and not np.isfinite(x):
        return str(x)
    return x


# -- stages ----------------------------------------------------------------------

class _Timer:
    def __init__(self):
        self.stages = {}

    def __call__(self, name):
        timer = self

        class _Ctx:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                timer.stages[name] = timer.stages.get(name, 0.0) + time.perf_counter() - self.t0

        return _Ctx()


def _estimate(pose_a: PoseData, pose_b: PoseData, cfg: RunConfig, timer: _Timer):
    """Overlap search and RANSAC between two loaded poses (a -> b)."""
    with timer("overlap"):
        m = overlap_matrix(pose_a.sequence, pose_b.sequence, cfg.ratio, jobs=cfg.jobs)
        i, j = best_pair(m)
        peaks = find_peaks(m.counts, step_deg=pose_a.sequence.step)
    with timer("ransac"):
        cs = correspondences(pose_a.sequence.features[i], pose_b.sequence.features[j], cfg.ratio)
        where = f"best view pair ({i}, {j}) has {len(cs)} matches"
        if len(cs) < cfg.min_inliers:
            raise NoOverlapError(f"{where}, fewer than min_inliers={cfg.min_inliers}")
        try:
            rr = ransac_rigid(cs.p, cs.q, threshold=cfg.ransac_threshold, confidence=cfg.ransac_confidence,
                              max_iter=cfg.ransac_max_iter, seed=cfg.seed)
        except NoConsensusError:
            rr = None
        if rr is None or rr.inlier_count < cfg.min_inliers:
            # chance matches between unrelated views do not agree on one rigid motion
            got = 0 if rr is None else rr.inlier_count
            raise NoOverlapError(f"{where} but at most {got} agree on a rigid motion "
                                 f"(min_inliers={cfg.min_inliers})")
    pair = {
        "i": int(i), "j": int(j),
        "angle1": float(pose_a.sequence.angles[i]), "angle2": float(pose_b.sequence.angles[j]),
        "matches": int(m.counts[i, j]),
    }
    peak_list = [{"i": a, "j": b, "count": c} for a, b, c in peaks]
    ransac = rr.to_dict()
    ransac["inlier_ratio"] = rr.inlier_count / rr.total_matches
    return m, pair, peak_list, rr, ransac


def _inputs(poses) -> dict:
    return {
        "poses": [str(p.directory) for p in poses],
        "views": [len(p.views) for p in poses],
        "images": [sorted({"view###" + v.image.name[7:] for v in p.views}) for p in poses],
    }


def align_two_poses(dir1, dir2, cfg: RunConfig | None = None, merged: bool = False):
    """Transform mapping the pose-1 cloud into the pose-2 frame, with its report.

    With ``merged=True`` a third value, the fused cloud in the pose-2 frame,
    is returned as well.
    """
    cfg = cfg or RunConfig()
    timer = _Timer()
    with timer("features"):
        p1 = load_pose(dir1, 1, cfg)
        p2 = load_pose(dir2, 2, cfg)
    _, pair, peaks, rr, ransac = _estimate(p1, p2, cfg, timer)
    transform = rr.transform
    icp = None
    clouds = None
    if not cfg.skip_icp or merged:
        with timer("load_clouds"):
            clouds = (load_pose_cloud(dir1), load_pose_cloud(dir2))
    if not cfg.skip_icp:
        with timer("icp"):
            # the newer pose moves, exactly as each link of align_sequence does
            res = icp_refine(clouds[1], clouds[0], invert(rr.transform), cfg.icp)
        transform = invert(res.transform)
        icp = res.to_dict()
        icp["residual_history"] = list(res.residual_history)
    report = RunReport(
        inputs=_inputs([p1, p2]), config=cfg.to_dict(), best_pair=pair, peaks=peaks,
        ransac=ransac, icp=icp, transform=transform.to_dict(), timing=timer.stages,
    )
    report.timing["cache_hits"] = p1.cache_hits + p2.cache_hits
    if merged:
        return transform, report, merge(clouds, [transform, RigidTransform.identity()])
    return transform, report


def align_sequence(dirs, cfg: RunConfig | None = None, merged: bool = False):
    """Transforms taking every pose into the pose-1 frame (the first is the identity).

    Pose k is matched against pose k-1; its RANSAC estimate is chained onto
    the previous pose and refined by ICP against the union of all poses
    aligned so far. Also returns the report (and the fused cloud when
    ``merged``).
    """
    cfg = cfg or RunConfig()
    dirs = list(dirs)
    if len(dirs) < 2:
        raise ValueError("align_sequence needs at least two pose directories")
    timer = _Timer()
    with timer("features"):
        poses = [load_pose(d, k + 1, cfg) for k, d in enumerate(dirs)]
    transforms = [RigidTransform.identity()]
    aligned = []
    links = []
    with timer("load_clouds"):
        clouds = [load_pose_cloud(d) for d in dirs]
    aligned.append(clouds[0])
    for k in range(1, len(dirs)):
        try:
            _, pair, peaks, rr, ransac = _estimate(poses[k - 1], poses[k], cfg, timer)
            init = transforms[k - 1] @ invert(rr.transform)
            t = init
            icp = None
            if not cfg.skip_icp:
                with timer("icp"):
                    fixed = aligned[0] if len(aligned) == 1 else concatenate(aligned)
                    res = icp_refine(clouds[k], fixed, init, cfg.icp)
                t = res.transform
                icp = res.to_dict()
                icp["residual_history"] = list(res.residual_history)
        except (RegistrationError, ValueError) as exc:
            raise type(exc)(f"link {k}->{k + 1} ({dirs[k - 1]} -> {dirs[k]}): {exc}") from exc
        transforms.append(t)
        aligned.append(apply(t, clouds[k]))
        links.append({"from": k + 1, "to": k, "best_pair": pair, "peaks": peaks, "ransac": ransac,
                      "icp": icp, "transform": t.to_dict()})
    last = links[-1]
    report = RunReport(
        inputs=_inputs(poses), config=cfg.to_dict(), best_pair=last["best_pair"], peaks=last["peaks"],
        ransac=last["ransac"], icp=last["icp"], transform=transforms[-1].to_dict(),
        timing=timer.stages, links=links,
    )
    report.timing["cache_hits"] = sum(p.cache_hits for p in poses)
    if merged:
        return transforms, report, merge(clouds, transforms)
    return transforms, report


def merge(clouds, transforms) -> PointCloud:
    """Concatenate the clouds after mapping each by its transform (no de-duplication)."""
    clouds, transforms = list(clouds), list(transforms)
    if len(clouds) != len(transforms):
        raise ValueError(f"{len(clouds)} clouds but {len(transforms)} transforms")
    return concatenate(apply(t, c) for t, c in zip(transforms, clouds))
