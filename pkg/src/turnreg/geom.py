"""Rigid transforms, point clouds and the pinhole camera model.

Conventions: points are ``(N, 3)`` float64 arrays, a :class:`RigidTransform`
maps ``x -> R @ x + t``, and a camera pose maps world coordinates into the
camera frame (x right, y down, z forward). Lengths are millimetres for real
scans and dimensionless for synthetic scenes.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ORTHO_TOL = 1e-9


class InvalidTransformError(ValueError):
    pass


class InvalidCameraError(ValueError):
    pass


def _frozen(a, dtype=np.float64, shape=None):
    arr = np.array(a, dtype=dtype, copy=True)
    if shape is not None and arr.shape != shape:
        raise ValueError(f"expected shape {shape}, got {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Proper rigid motion ``x -> rotation @ x + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = _frozen(self.rotation, shape=(3, 3))
        t = _frozen(self.translation, shape=(3,))
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise InvalidTransformError("transform has non-finite entries")
        if np.max(np.abs(r.T @ r - np.eye(3))) >= ORTHO_TOL:
            raise InvalidTransformError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > ORTHO_TOL:
            raise InvalidTransformError("rotation has det != +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> RigidTransform:
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def __call__(self, points):
        """Apply to a single point ``(3,)`` or an array ``(N, 3)``."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def __matmul__(self, other: RigidTransform) -> RigidTransform:
        return compose(self, other)

    def inverse(self) -> RigidTransform:
        return invert(self)

    def to_dict(self) -> dict:
        return {
            "rotation": [float(v) for v in self.rotation.ravel()],
            "translation": [float(v) for v in self.translation],
        }

    @classmethod
    def from_dict(cls, d: dict) -> RigidTransform:
        rot = np.asarray(d["rotation"], dtype=np.float64)
        if rot.size != 9 or len(d["translation"]) != 3:
            raise InvalidTransformError("rotation needs 9 numbers, translation 3")
        return cls(rot.reshape(3, 3), d["translation"])

    def __repr__(self):
        return f"RigidTransform(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform applying ``b`` first, then ``a``."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(t: RigidTransform) -> RigidTransform:
    rt = t.rotation.T
    return RigidTransform(rt, -rt @ t.translation)


def save_transform(t: RigidTransform, path, **extra):
    d = t.to_dict()
    d.update(extra)
    Path(path).write_text(json.dumps(d, indent=2) + "\n")


class GeomFileError(ValueError):
    """A transform or camera file that cannot be parsed."""


def _load_json(path, build):
    text = Path(path).read_text()
    try:
        return build(json.loads(text))
    except (ValueError, KeyError, TypeError) as exc:
        raise GeomFileError(f"{path}: {exc}") from None


def load_transform(path) -> RigidTransform:
    return _load_json(path, RigidTransform.from_dict)


# -- rotations ---------------------------------------------------------------

def rot_x(deg):
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return np.array([[1.0, 0, 0], [0, c, -s], [0, s, c]])


def rot_y(deg):
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return np.array([[c, 0, s], [0, 1.0, 0], [-s, 0, c]])


def rot_z(deg):
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])


def axis_angle(axis, deg):
    """Rodrigues rotation matrix about ``axis`` by ``deg`` degrees."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    a = math.radians(deg)
    return np.eye(3) + math.sin(a) * kx + (1 - math.cos(a)) * (kx @ kx)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed rotation (normalised Gaussian quaternion)."""
    q = rng.normal(size=4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def rotation_angle_error(a: RigidTransform, b: RigidTransform) -> float:
    """Geodesic angle in degrees between the two rotations, in [0, 180]."""
    m = a.rotation @ b.rotation.T
    # the sin/cos form stays accurate near 0 and 180 where acos loses digits
    c = (np.trace(m) - 1.0) / 2.0
    axis = np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])
    s = np.linalg.norm(axis) / 2.0
    return math.degrees(math.atan2(s, c))


def translation_error(a: RigidTransform, b: RigidTransform) -> float:
    return float(np.linalg.norm(a.translation - b.translation))


# -- point clouds --------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PointCloud:
    """Ordered 3D points with optional intensity in [0, 1].

    ``extra`` carries any other per-point scalar properties read from disk;
    they ride along through :func:`apply` but are not written back out.
    """

    points: np.ndarray
    intensity: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64, copy=True).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.intensity is not None:
            inten = _frozen(self.intensity)
            if inten.shape != (len(pts),):
                raise ValueError("intensity length does not match point count")
            if np.any(inten < 0) or np.any(inten > 1) or not np.all(np.isfinite(inten)):
                raise ValueError("intensity must lie in [0, 1]")
            object.__setattr__(self, "intensity", inten)
        extra = {}
        for k, v in self.extra.items():
            v = _frozen(v, dtype=None)
            if len(v) != len(pts):
                raise ValueError(f"property {k!r} length does not match point count")
            extra[k] = v
        object.__setattr__(self, "extra", extra)

    def __len__(self):
        return len(self.points)

    def subset(self, idx) -> PointCloud:
        idx = np.asarray(idx)
        return PointCloud(
            self.points[idx],
            None if self.intensity is None else self.intensity[idx],
            {k: v[idx] for k, v in self.extra.items()},
        )


def apply(t: RigidTransform, cloud: PointCloud) -> PointCloud:
    """Return ``cloud`` mapped by ``t``; order and per-point attributes are kept."""
    return PointCloud(t(cloud.points), cloud.intensity, cloud.extra)


def concatenate(clouds) -> PointCloud:
    clouds = list(clouds)
    if not clouds:
        return PointCloud(np.empty((0, 3)))
    pts = np.concatenate([c.points for c in clouds])
    if all(c.intensity is not None for c in clouds):
        inten = np.concatenate([c.intensity for c in clouds])
    else:
        inten = None
    return PointCloud(pts, inten)


def nn_rmse(a: np.ndarray, b: np.ndarray) -> float:
    """RMS distance from each point of ``a`` to its nearest neighbour in ``b``."""
    from .spatial import KDTree

    d, _ = KDTree(b).query(a)
    return float(np.sqrt(np.mean(d * d)))


# -- camera ---------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PinholeCamera:
    """Distortion-free pinhole camera; ``pose`` maps world to camera frame."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: RigidTransform = field(default_factory=RigidTransform.identity)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidCameraError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidCameraError("principal point outside the image")

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return -self.pose.rotation.T @ self.pose.translation

    def with_pose(self, pose: RigidTransform) -> PinholeCamera:
        return PinholeCamera(self.fx, self.fy, self.cx, self.cy, self.width, self.height, pose)

    def to_dict(self) -> dict:
        d = {
            "fx": float(self.fx), "fy": float(self.fy),
            "cx": float(self.cx), "cy": float(self.cy),
            "width": int(self.width), "height": int(self.height),
        }
        d.update(self.pose.to_dict())
        return d

    @classmethod
    def from_dict(cls, d: dict) -> PinholeCamera:
        return cls(
            float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
            int(d["width"]), int(d["height"]), RigidTransform.from_dict(d),
        )


def save_camera(cam: PinholeCamera, path, **extra):
    d = cam.to_dict()
    d.update(extra)
    Path(path).write_text(json.dumps(d, indent=2) + "\n")


def load_camera(path) -> PinholeCamera:
    return _load_json(path, PinholeCamera.from_dict)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> RigidTransform:
    """World-to-camera pose of a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(x) < 1e-12:
        raise InvalidCameraError("viewing direction parallel to up vector")
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    r = np.stack([x, y, z])
    return RigidTransform(r, -r @ eye)


def project(cam: PinholeCamera, p):
    """Project one world point; returns ``(u, v, depth)`` or None if behind the camera."""
    pc = cam.pose(p)
    z = pc[2]
    if not z > 0:
        return None
    return (cam.cx + cam.fx * pc[0] / z, cam.cy + cam.fy * pc[1] / z, float(z))


def project_points(cam: PinholeCamera, points):
    """Vectorised :func:`project`: ``(uv, depth)``; uv rows are NaN where depth <= 0."""
    pc = cam.pose(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    z = pc[:, 2]
    front = z > 0
    uv = np.full((len(pc), 2), np.nan)
    zf = z[front]
    uv[front, 0] = cam.cx + cam.fx * pc[front, 0] / zf
    uv[front, 1] = cam.cy + cam.fy * pc[front, 1] / zf
    return uv, z


def unproject(cam: PinholeCamera, u, v, depth):
    """Camera-frame point seen at pixel ``(u, v)`` with camera-frame depth."""
    return np.array([(u - cam.cx) / cam.fx * depth, (v - cam.cy) / cam.fy * depth, depth])


def pixel_rays(cam: PinholeCamera, u, v):
    """World-frame unit ray directions through pixel coordinates ``u, v``."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    d = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones_like(u)], axis=-1)
    d = d @ cam.pose.rotation  # camera -> world: R^T d, row-vector form
    return d / np.linalg.norm(d, axis=-1, keepdims=True)
