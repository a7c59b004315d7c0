"""Synthetic two-pose turntable scans with exact ground truth.

The object lives in its own frame, centred at the origin. Pose 1 places it
unchanged on the turntable; pose 2 applies ``scene.pose_change``. A view at
turntable angle ``a`` is rendered with the camera orbiting the turntable axis
by ``-a``, so every part-scan comes out in its pose's (turntable) frame, as
it would from a calibrated rotation stage.

Surfaces are implicit functions ``F(x) = 0`` (negative inside) that are ray
cast by sphere tracing. Sample sites, with their normals, are laid out once
per object; a part-scan is the subset of sites a view sees, displaced along
the normal by the pose's range noise.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ._jit import USE_JIT, njit
from .geom import (PinholeCamera, PointCloud, RigidTransform, axis_angle, invert, look_at,
                   pixel_rays, project_points, save_camera, save_transform)
from .image import Image, save_pgm
from .ply import write_ply

SPHERE, TORUS, PLAQUE = 0, 1, 2
_KINDS = {"sphere": SPHERE, "torus": TORUS, "plaque": PLAQUE}
BACKGROUND = 0.05
ROOT_ITERS = 16


def default_pose_change(diameter=100.0) -> RigidTransform:
    """120 degrees about an axis tilted 30 degrees from vertical, shifted by 0.2 diameters."""
    axis = (math.sin(math.radians(30.0)), 0.0, math.cos(math.radians(30.0)))
    shift = 0.2 * diameter * np.array([math.cos(math.radians(45.0)), math.sin(math.radians(45.0)), 0.0])
    return RigidTransform(axis_angle(axis, 120.0), shift)


@dataclass(frozen=True)
class SyntheticScene:
    surface: str = "sphere"
    diameter: float = 100.0
    relief: float = 0.08  # amplitude of each radial bump of the sphere, fraction of base radius
    relief_bumps: int = 6
    relief_band: tuple = (9.0, 14.0)  # angular frequencies of the bumps
    shape_seed: int = 0
    texture_cells: float = 50.0  # coarsest noise cells across one diameter
    texture_octaves: int = 2
    texture_gain: float = 2.2
    grid_amplitude: float = 0.0  # repetitive component, 0 disables
    grid_period: float = 12.0  # length units
    # copies of the pattern around the turntable axis, like repeated facade elements; the copies
    # look alike only on surfaces that are themselves symmetric about z (relief=0 sphere, torus)
    texture_repeats: int = 1
    width: int = 512
    height: int = 512
    focal: float | None = None  # pixels; None frames the object with margin
    camera_distance: float = 300.0
    elevation_deg: float = 20.0
    angular_step: float = 5.0
    pose_change: RigidTransform = field(default_factory=default_pose_change)
    point_noise: float = 0.02  # std of range noise along the normal
    pixel_noise: float = 0.005
    shading: float = 0.0  # headlight shading strength; 0 is uniform illumination
    spacing: float | None = None  # None -> diameter / 500
    max_obliquity_deg: float = 75.0
    supersample: int = 1

    def __post_init__(self):
        if self.surface not in _KINDS:
            raise ValueError(f"unknown surface {self.surface!r}")
        n = 360.0 / self.angular_step
        if abs(n - round(n)) > 1e-9:
            raise ValueError("angular step must divide 360")
        if int(self.texture_repeats) < 1:
            raise ValueError("texture_repeats must be >= 1")

    @property
    def n_views(self) -> int:
        return int(round(360.0 / self.angular_step))

    @property
    def point_spacing(self) -> float:
        return self.spacing if self.spacing is not None else self.diameter / 500.0

    @property
    def focal_px(self) -> float:
        if self.focal is not None:
            return self.focal
        return 0.5 * min(self.width, self.height) * self.camera_distance / (0.8 * self.diameter)

    def angles(self) -> np.ndarray:
        return np.arange(self.n_views) * self.angular_step

    def describe(self) -> dict:
        d = asdict(self)
        d["pose_change"] = self.pose_change.to_dict()
        return d


# -- implicit surfaces ---------------------------------------------------------------

@njit(cache=True)
def _surface_f(kind, prm, x, y, z):
    if kind == SPHERE:
        # prm = [base radius, bump count, (ux, uy, uz, freq, phase, amp) per bump]
        r = math.sqrt(x * x + y * y + z * z)
        if r == 0.0:
            return -prm[0]
        g = 1.0
        for k in range(int(prm[1])):
            o = 2 + 6 * k
            dot = (x * prm[o] + y * prm[o + 1] + z * prm[o + 2]) / r
            g += prm[o + 5] * math.sin(prm[o + 3] * dot + prm[o + 4])
        return r - prm[0] * g
    if kind == TORUS:
        q = math.sqrt(x * x + y * y) - prm[0]
        return math.sqrt(q * q + z * z) - prm[1]
    # plaque: disc of radius prm[0], bottom at -prm[1], top at prm[1] + relief
    rho = math.sqrt(x * x + y * y)
    top = prm[1] + prm[2] * math.sin(prm[3] * x + prm[5]) * math.cos(prm[4] * y + prm[6])
    return max(rho - prm[0], max(-prm[1] - z, z - top))


@njit(cache=True)
def _trace_kernel(kind, prm, lip, bound, origins, dirs, eps, hmin):
    n = origins.shape[0]
    t_out = np.full(n, np.inf)
    for i in range(n):
        ox, oy, oz = origins[i, 0], origins[i, 1], origins[i, 2]
        dx, dy, dz = dirs[i, 0], dirs[i, 1], dirs[i, 2]
        b = ox * dx + oy * dy + oz * dz
        c = ox * ox + oy * oy + oz * oz - bound * bound
        disc = b * b - c
        if disc <= 0.0:
            continue
        sq = math.sqrt(disc)
        t = max(-b - sq, 0.0)
        t_far = -b + sq
        t_prev = t
        f_prev = 0.0
        for _ in range(1000):
            f = _surface_f(kind, prm, ox + t * dx, oy + t * dy, oz + t * dz)
            if f < eps:
                if f < -eps:
                    # overshot: Illinois false position back to the crossing
                    lo, hi, flo, fhi = t_prev, t, f_prev, f
                    side = 0
                    for _ in range(ROOT_ITERS):
                        den = fhi - flo
                        m = 0.5 * (lo + hi) if den == 0.0 else hi - fhi * (hi - lo) / den
                        fm = _surface_f(kind, prm, ox + m * dx, oy + m * dy, oz + m * dz)
                        if fm > 0.0:
                            lo, flo = m, fm
                            if side == 1:
                                fhi *= 0.5
                            side = 1
                        else:
                            hi, fhi = m, fm
                            if side == -1:
                                flo *= 0.5
                            side = -1
                    t = hi if -fhi < flo else lo
                t_out[i] = t
                break
            t_prev = t
            f_prev = f
            t += max(f / lip, hmin)
            if t > t_far:
                break
    return t_out


def _surface_f_np(kind, prm, x, y, z):
    if kind == SPHERE:
        r = np.sqrt(x * x + y * y + z * z)
        rs = np.where(r == 0.0, 1.0, r)
        g = np.ones_like(r)
        for k in range(int(prm[1])):
            o = 2 + 6 * k
            dot = (x * prm[o] + y * prm[o + 1] + z * prm[o + 2]) / rs
            g = g + prm[o + 5] * np.sin(prm[o + 3] * dot + prm[o + 4])
        return np.where(r == 0.0, -prm[0], r - prm[0] * g)
    if kind == TORUS:
        q = np.sqrt(x * x + y * y) - prm[0]
        return np.sqrt(q * q + z * z) - prm[1]
    rho = np.sqrt(x * x + y * y)
    top = prm[1] + prm[2] * np.sin(prm[3] * x + prm[5]) * np.cos(prm[4] * y + prm[6])
    return np.maximum(rho - prm[0], np.maximum(-prm[1] - z, z - top))


def _trace_np(kind, prm, lip, bound, origins, dirs, eps, hmin):
    n = len(origins)
    t_out = np.full(n, np.inf)
    b = np.einsum("ij,ij->i", origins, dirs)
    c = np.einsum("ij,ij->i", origins, origins) - bound * bound
    disc = b * b - c
    idx = np.flatnonzero(disc > 0.0)
    sq = np.sqrt(disc[idx])
    t = np.maximum(-b[idx] - sq, 0.0)
    t_far = -b[idx] + sq
    t_prev = t.copy()
    f_prev = np.zeros_like(t)
    o, d = origins[idx], dirs[idx]

    def f_at(tt, oo, dd):
        p = oo + tt[:, None] * dd
        return _surface_f_np(kind, prm, p[:, 0], p[:, 1], p[:, 2])

    for _ in range(1000):
        if len(idx) == 0:
            break
        f = f_at(t, o, d)
        hit = f < eps
        over = np.flatnonzero(f < -eps)
        if len(over):
            lo, hi, flo, fhi = t_prev[over], t[over], f_prev[over], f[over]
            side = np.zeros(len(over))
            for _ in range(ROOT_ITERS):
                den = fhi - flo
                safe = np.where(den == 0.0, 1.0, den)
                m = np.where(den == 0.0, 0.5 * (lo + hi), hi - fhi * (hi - lo) / safe)
                fm = f_at(m, o[over], d[over])
                pos = fm > 0.0
                fhi = np.where(pos & (side == 1), 0.5 * fhi, fhi)
                flo = np.where(~pos & (side == -1), 0.5 * flo, flo)
                lo, flo = np.where(pos, m, lo), np.where(pos, fm, flo)
                hi, fhi = np.where(pos, hi, m), np.where(pos, fhi, fm)
                side = np.where(pos, 1.0, -1.0)
            t[over] = np.where(-fhi < flo, hi, lo)
        t_out[idx[hit]] = t[hit]
        t_prev, f_prev = t, f
        t = t + np.maximum(f / lip, hmin)
        alive = ~hit & (t <= t_far)
        idx, t, t_prev, f_prev = idx[alive], t[alive], t_prev[alive], f_prev[alive]
        t_far, o, d = t_far[alive], o[alive], d[alive]
    return t_out


# -- texture --------------------------------------------------------------------------

@njit(cache=True)
def _value_noise(perm, vals, x, y, z):
    xf, yf, zf = math.floor(x), math.floor(y), math.floor(z)
    xi, yi, zi = int(xf) & 255, int(yf) & 255, int(zf) & 255
    fx, fy, fz = x - xf, y - yf, z - zf
    ux = fx * fx * (3.0 - 2.0 * fx)
    uy = fy * fy * (3.0 - 2.0 * fy)
    uz = fz * fz * (3.0 - 2.0 * fz)
    acc = 0.0
    for cz in range(2):
        wz = uz if cz == 1 else 1.0 - uz
        for cy in range(2):
            wy = uy if cy == 1 else 1.0 - uy
            for cx in range(2):
                wx = ux if cx == 1 else 1.0 - ux
                h = perm[perm[perm[(xi + cx) & 255] + ((yi + cy) & 255)] + ((zi + cz) & 255)]
                acc += wx * wy * wz * vals[h]
    return acc


@njit(cache=True)
def _texture_kernel(perm, vals, pts, freq0, octaves, gain, grid_amp, grid_period, repeats):
    n = pts.shape[0]
    out = np.empty(n)
    norm = 0.0
    a = 1.0
    for _ in range(octaves):
        norm += a
        a *= 0.5
    w = 2.0 * math.pi / grid_period
    sector = 2.0 * math.pi / repeats
    for i in range(n):
        x0, y0, z = pts[i, 0], pts[i, 1], pts[i, 2]
        x, y = x0, y0
        if repeats > 1:
            # fold the azimuth into the first sector so the pattern repeats around z
            rot = -math.floor((math.atan2(y0, x0) + math.pi) / sector) * sector
            c, sn = math.cos(rot), math.sin(rot)
            x, y = c * x0 - sn * y0, sn * x0 + c * y0
        s = 0.0
        a = 1.0
        f = freq0
        for k in range(octaves):
            off = 17.31 * k
            s += a * _value_noise(perm, vals, x * f + off, y * f + off, z * f + off)
            a *= 0.5
            f *= 2.0
        v = 0.5 + gain * (s / norm - 0.5)
        if grid_amp != 0.0:
            v += grid_amp * math.cos(w * x0) * math.cos(w * y0) * math.cos(w * z)
        out[i] = min(max(v, 0.1), 0.95)
    return out


def _fold_azimuth(pts, repeats):
    sector = 2.0 * math.pi / repeats
    rot = -np.floor((np.arctan2(pts[:, 1], pts[:, 0]) + math.pi) / sector) * sector
    c, s = np.cos(rot), np.sin(rot)
    return np.column_stack([c * pts[:, 0] - s * pts[:, 1], s * pts[:, 0] + c * pts[:, 1], pts[:, 2]])


def _texture_np(perm, vals, pts, freq0, octaves, gain, grid_amp, grid_period, repeats):
    norm = sum(0.5 ** k for k in range(octaves))
    s = np.zeros(len(pts))
    f = freq0
    folded = _fold_azimuth(pts, repeats) if repeats > 1 else pts
    for k in range(octaves):
        p = folded * f + 17.31 * k
        fl = np.floor(p)
        i = fl.astype(np.int64) & 255
        fr = p - fl
        u = fr * fr * (3.0 - 2.0 * fr)
        acc = np.zeros(len(pts))
        for cz in range(2):
            wz = u[:, 2] if cz else 1.0 - u[:, 2]
            for cy in range(2):
                wy = u[:, 1] if cy else 1.0 - u[:, 1]
                for cx in range(2):
                    wx = u[:, 0] if cx else 1.0 - u[:, 0]
                    h = perm[perm[perm[(i[:, 0] + cx) & 255] + ((i[:, 1] + cy) & 255)] + ((i[:, 2] + cz) & 255)]
                    acc = acc + wx * wy * wz * vals[h]
        s = s + 0.5 ** k * acc
        f *= 2.0
    v = 0.5 + gain * (s / norm - 0.5)
    if grid_amp != 0.0:
        w = 2.0 * math.pi / grid_period
        v = v + grid_amp * np.cos(w * pts[:, 0]) * np.cos(w * pts[:, 1]) * np.cos(w * pts[:, 2])
    return np.clip(v, 0.1, 0.95)


def _fibonacci(n: int) -> np.ndarray:
    """Near-uniform unit directions on a golden-angle spiral."""
    k = np.arange(n) + 0.5
    zc = 1.0 - 2.0 * k / n
    phi = math.pi * (3.0 - math.sqrt(5.0)) * k
    rc = np.sqrt(1.0 - zc * zc)
    return np.column_stack([rc * np.cos(phi), rc * np.sin(phi), zc])


# -- object ------------------------------------------------------------------------

class SceneObject:
    """Surface, texture and sample sites of a scene, fixed by ``seed``."""

    def __init__(self, scene: SyntheticScene, seed: int = 0):
        self.scene = scene
        self.seed = seed
        # geometry depends on the scene alone; texture and noise on the seed
        shape_rng = np.random.default_rng([scene.shape_seed, 0x5EA9E])
        rng = np.random.default_rng([seed, 0xC0FFEE])
        self.kind = _KINDS[scene.surface]
        rad = 0.5 * scene.diameter
        if self.kind == SPHERE:
            bumps = []
            for _ in range(scene.relief_bumps):
                u = shape_rng.normal(size=3)
                u /= np.linalg.norm(u)
                bumps.extend([u[0], u[1], u[2], shape_rng.uniform(*scene.relief_band),
                              shape_rng.uniform(0, 2 * np.pi), scene.relief])
            prm = np.array([1.0, scene.relief_bumps] + bumps)
            # scale the base radius so the outermost point sits at half the diameter
            dirs = _fibonacci(200_000)
            g = 1.0 - _surface_f_np(SPHERE, prm, *dirs.T)
            prm[0] = rad / g.max()
            self.params = prm
            self.bound = rad * 1.01
            self.lipschitz = self._estimate_lipschitz(shape_rng)
        elif self.kind == TORUS:
            self.params = np.array([0.35 * scene.diameter, 0.15 * scene.diameter])
            self.lipschitz = 1.0
            self.bound = 0.5 * scene.diameter * 1.001
        else:
            amp, fx, fy = 0.03 * scene.diameter, 6.0 / scene.diameter, 5.0 / scene.diameter
            self.params = np.array([rad, 0.1 * scene.diameter, amp, fx, fy,
                                    rng.uniform(0, 2 * np.pi), rng.uniform(0, 2 * np.pi)])
            self.lipschitz = math.sqrt(1.0 + (amp * (fx + fy)) ** 2) * 1.2
            self.bound = math.hypot(rad, 0.1 * scene.diameter + amp) * 1.001
        perm = rng.permutation(256)
        self.perm = np.concatenate([perm, perm]).astype(np.int64)
        self.vals = rng.random(256)
        self.sites, self.normals = self._sample_sites()

    def _estimate_lipschitz(self, rng):
        """Upper estimate of |grad F| outside the surface, with margin."""
        p = rng.normal(size=(200_000, 3))
        p *= (self.bound * rng.random(len(p)) ** (1 / 3) / np.linalg.norm(p, axis=1))[:, None]
        p = p[self.f(p) > 0.0]  # rays only march through the exterior
        h = 1e-6 * self.scene.diameter
        g = np.stack([self.f(p + h * e) - self.f(p - h * e) for e in np.eye(3)], axis=1) / (2 * h)
        return 1.25 * float(np.linalg.norm(g, axis=1).max())

    def _surface_area(self, pts):
        """Area of a star-shaped surface from points on uniform directions."""
        r = np.linalg.norm(pts, axis=1)
        cos = np.abs(np.einsum("ij,ij->i", self.normal(pts), pts)) / r
        return float(4 * math.pi * np.mean(r * r / cos))

    # surface evaluation
    def f(self, pts):
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        return _surface_f_np(self.kind, self.params, pts[:, 0], pts[:, 1], pts[:, 2])

    def normal(self, pts):
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        h = 1e-6 * self.scene.diameter
        g = np.empty_like(pts)
        for d in range(3):
            e = np.zeros(3)
            e[d] = h
            g[:, d] = self.f(pts + e) - self.f(pts - e)
        return g / np.linalg.norm(g, axis=1, keepdims=True)

    def texture(self, pts, use_jit=None):
        pts = np.ascontiguousarray(pts, dtype=np.float64).reshape(-1, 3)
        s = self.scene
        fn = _texture_kernel if (USE_JIT if use_jit is None else use_jit) else _texture_np
        return fn(self.perm, self.vals, pts, s.texture_cells / s.diameter, s.texture_octaves,
                  s.texture_gain, s.grid_amplitude, s.grid_period, int(s.texture_repeats))

    def trace(self, origins, dirs, use_jit=None):
        """Ray parameter of the first hit (inf on a miss), object frame."""
        fn = _trace_kernel if (USE_JIT if use_jit is None else use_jit) else _trace_np
        # sphere tracing with a floor on the step; overshoots are bisected
        eps = 1e-9 * self.scene.diameter
        hmin = 2e-3 * self.scene.diameter
        return fn(self.kind, self.params, self.lipschitz, self.bound,
                  np.ascontiguousarray(origins, dtype=np.float64),
                  np.ascontiguousarray(dirs, dtype=np.float64), eps, hmin)

    def _sample_sites(self):
        s = self.scene.point_spacing
        if self.kind == SPHERE:
            # on unit directions F = 1 - r(d), so the radial function is 1 - F
            dirs = _fibonacci(64_000)
            pts = dirs * (1.0 - _surface_f_np(SPHERE, self.params, *dirs.T))[:, None]
            n = int(round(self._surface_area(pts) / (s * s)))
            dirs = _fibonacci(n)
            pts = dirs * (1.0 - _surface_f_np(SPHERE, self.params, *dirs.T))[:, None]
        elif self.kind == TORUS:
            big, small = self.params
            nv = int(round(2 * math.pi * small / s))
            v = 2 * math.pi * (np.arange(nv) + 0.5) / nv
            rings = []
            for vk in v:
                circ = big + small * math.cos(vk)
                nu = max(3, int(round(2 * math.pi * circ / s)))
                u = 2 * math.pi * (np.arange(nu) + 0.5 * (vk > math.pi)) / nu
                rings.append(np.column_stack([circ * np.cos(u), circ * np.sin(u), np.full(nu, small * math.sin(vk))]))
            pts = np.concatenate(rings)
        else:
            rad, half, amp, fx, fy, px, py = self.params
            step = s
            g = np.arange(-rad, rad + step / 2, step)
            gx, gy = np.meshgrid(g, g * math.sqrt(3) / 2)
            gx = gx + (np.round(gy / (step * math.sqrt(3) / 2)) % 2) * step / 2
            disc = gx ** 2 + gy ** 2 < (rad - 0.5 * step) ** 2
            tx, ty = gx[disc], gy[disc]
            top = np.column_stack([tx, ty, half + amp * np.sin(fx * tx + px) * np.cos(fy * ty + py)])
            bottom = np.column_stack([tx, ty, np.full(len(tx), -half)])
            nth = int(round(2 * math.pi * rad / s))
            th = 2 * math.pi * (np.arange(nth) + 0.5) / nth
            zs = np.arange(-half + 0.5 * s, half - 0.5 * s, s)
            tt, zz = np.meshgrid(th, zs)
            side = np.column_stack([rad * np.cos(tt.ravel()), rad * np.sin(tt.ravel()), zz.ravel()])
            pts = np.concatenate([top, bottom, side])
            # keep only side samples below the relief top
            pts = pts[self.f(pts) <= 1e-9]
        return pts, self.normal(pts)


# -- views ------------------------------------------------------------------------

def _object_to_pose(scene: SyntheticScene, pose_id: int) -> RigidTransform:
    return RigidTransform.identity() if pose_id == 1 else scene.pose_change


def view_camera(scene: SyntheticScene, angle: float) -> PinholeCamera:
    """Camera of the view at turntable ``angle`` in the turntable frame."""
    a = math.radians(-angle)
    e = math.radians(scene.elevation_deg)
    eye = scene.camera_distance * np.array([math.cos(e) * math.cos(a), math.cos(e) * math.sin(a), math.sin(e)])
    f = scene.focal_px
    return PinholeCamera(f, f, (scene.width - 1) / 2.0, (scene.height - 1) / 2.0,
                         scene.width, scene.height, look_at(eye, np.zeros(3)))


@dataclass(frozen=True, eq=False)
class RenderedView:
    image: Image
    cloud: PointCloud
    camera: PinholeCamera
    site_index: np.ndarray  # indices into the object's sample sites
    angle: float
    pose_id: int

    def __iter__(self):
        return iter((self.image, self.cloud, self.camera))


def _render_image(obj: SceneObject, cam: PinholeCamera, to_pose: RigidTransform, rng):
    sc = obj.scene
    ss = max(1, int(sc.supersample))
    offs = (np.arange(ss) + 0.5) / ss - 0.5
    vv, uu = np.meshgrid(np.arange(sc.height, dtype=np.float64), np.arange(sc.width, dtype=np.float64),
                         indexing="ij")
    to_obj = invert(to_pose)
    origin = to_obj(cam.center)
    axis = cam.pose.rotation[2]
    acc = np.zeros((sc.height, sc.width))
    depth = np.full((sc.height, sc.width), np.inf)
    for oy in offs:
        for ox in offs:
            d_world = pixel_rays(cam, uu + ox, vv + oy).reshape(-1, 3)
            d_obj = d_world @ to_obj.rotation.T
            o = np.broadcast_to(origin, d_obj.shape)
            t = obj.trace(o, d_obj)
            hit = np.isfinite(t)
            val = np.full(len(t), BACKGROUND)
            if hit.any():
                p = origin + t[hit, None] * d_obj[hit]
                val[hit] = obj.texture(p)
                if sc.shading:
                    cos = np.clip(-np.einsum("ij,ij->i", obj.normal(p), d_obj[hit]), 0.0, 1.0)
                    val[hit] *= 1.0 - sc.shading + sc.shading * cos
                z = np.full(len(t), np.inf)
                z[hit] = t[hit] * (d_world[hit] @ axis)
                depth = np.minimum(depth, z.reshape(depth.shape))
            acc += val.reshape(acc.shape)
    img = acc / (ss * ss)
    if sc.pixel_noise > 0:
        img = img + rng.normal(0.0, sc.pixel_noise, img.shape)
    return np.clip(img, 0.0, 1.0), depth


def _visible_sites(obj: SceneObject, cam: PinholeCamera, to_pose: RigidTransform, depth):
    sc = obj.scene
    center_obj = invert(to_pose)(cam.center)
    ray = center_obj - obj.sites
    dist = np.linalg.norm(ray, axis=1)
    cos_ob = np.einsum("ij,ij->i", ray, obj.normals) / dist
    cand = np.flatnonzero(cos_ob > math.cos(math.radians(sc.max_obliquity_deg)))
    uv, z = project_points(cam, to_pose(obj.sites[cand]))
    u, v = uv[:, 0], uv[:, 1]
    inside = (z > 0) & (u >= 0) & (u <= sc.width - 1) & (v >= 0) & (v <= sc.height - 1)
    cand, u, v, z = cand[inside], u[inside], v[inside], z[inside]
    # occlusion: some pixel around the projection must see the surface at least this deep
    pad = np.pad(depth, 1, mode="edge")
    pad = np.where(np.isfinite(pad), pad, np.inf)
    ui = np.floor(u + 0.5).astype(np.int64) + 1
    vi = np.floor(v + 0.5).astype(np.int64) + 1
    reach = np.full(len(cand), -np.inf)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            reach = np.maximum(reach, pad[vi + dy, ui + dx])
    tol = 2e-3 * sc.diameter
    return cand[z <= reach + tol]


def _noisy_sites(obj: SceneObject, pose_id: int, seed: int) -> np.ndarray:
    sigma = obj.scene.point_noise
    pts = obj.sites
    if sigma > 0:
        rng = np.random.default_rng([seed, pose_id, 0x5CA9])
        pts = pts + obj.normals * rng.normal(0.0, sigma, len(pts))[:, None]
    return _object_to_pose(obj.scene, pose_id)(pts)


def render_view(scene: SyntheticScene, pose_id: int, angle: float, seed: int = 0, obj: SceneObject | None = None,
                noisy_sites: np.ndarray | None = None) -> RenderedView:
    """Render the fully lit image and part-scan of one view."""
    if not 0.0 <= angle < 360.0:
        raise ValueError(f"angle {angle} outside [0, 360)")
    if pose_id not in (1, 2):
        raise ValueError("pose_id must be 1 or 2")
    obj = obj or SceneObject(scene, seed)
    if noisy_sites is None:
        noisy_sites = _noisy_sites(obj, pose_id, seed)
    to_pose = _object_to_pose(scene, pose_id)
    cam = view_camera(scene, angle)
    rng = np.random.default_rng([seed, pose_id, int(round(angle * 1000)), 0x1A6E])
    img, depth = _render_image(obj, cam, to_pose, rng)
    idx = _visible_sites(obj, cam, to_pose, depth)
    return RenderedView(Image(img), PointCloud(noisy_sites[idx]), cam, idx, float(angle), pose_id)


# -- datasets ------------------------------------------------------------------------

class SyntheticDataset:
    """Two scan rings of one object; views render on demand, deterministically."""

    def __init__(self, scene: SyntheticScene, seed: int = 0):
        self.scene = scene
        self.seed = seed
        self.object = SceneObject(scene, seed)
        self.ground_truth = scene.pose_change
        self._noisy = {p: _noisy_sites(self.object, p, seed) for p in (1, 2)}
        self._covered = {}  # rendering is deterministic, so coverage is remembered once known

    @property
    def angles(self) -> np.ndarray:
        return self.scene.angles()

    def view(self, pose_id: int, k: int) -> RenderedView:
        return render_view(self.scene, pose_id, float(self.angles[k]), self.seed, self.object, self._noisy[pose_id])

    def views(self, pose_id: int):
        for k in range(len(self.angles)):
            yield self.view(pose_id, k)

    def pose_cloud(self, pose_id: int, site_index=None) -> PointCloud:
        """Union of all part-scans of a pose (sites ordered by index)."""
        if site_index is None:
            site_index = self.covered_sites(pose_id)
        return PointCloud(self._noisy[pose_id][site_index])

    def covered_sites(self, pose_id: int) -> np.ndarray:
        if pose_id not in self._covered:
            seen = np.zeros(len(self.object.sites), dtype=bool)
            for v in self.views(pose_id):
                seen[v.site_index] = True
            self._covered[pose_id] = np.flatnonzero(seen)
        return self._covered[pose_id].copy()

    def view_directions(self, pose_id: int) -> np.ndarray:
        """Unit directions from the object centre to every camera, object frame."""
        to_obj = invert(_object_to_pose(self.scene, pose_id))
        c = np.array([to_obj(view_camera(self.scene, a).center) for a in self.angles])
        return c / np.linalg.norm(c, axis=1, keepdims=True)

    def view_angle_matrix(self) -> np.ndarray:
        """Angle (degrees) between the viewing directions of every pose-1/pose-2 pair."""
        d1, d2 = self.view_directions(1), self.view_directions(2)
        return np.degrees(np.arccos(np.clip(d1 @ d2.T, -1.0, 1.0)))


def ring_intersections(scene: SyntheticScene, resolution_deg: float = 0.5, window_deg: float = 20.0):
    """Turntable angle pairs (a1, a2) where the two camera rings see the object from the same direction.

    Returns the local minima of the viewing-direction angle on a fine grid,
    closest first, as ``[(a1, a2, separation_deg), ...]``.
    """
    ang = np.arange(0.0, 360.0, resolution_deg)
    dirs = {}
    for p in (1, 2):
        to_obj = invert(_object_to_pose(scene, p))
        c = np.array([to_obj(view_camera(scene, a).center) for a in ang])
        dirs[p] = c / np.linalg.norm(c, axis=1, keepdims=True)
    sep = np.degrees(np.arccos(np.clip(dirs[1] @ dirs[2].T, -1.0, 1.0)))
    local = np.ones(sep.shape, dtype=bool)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di or dj:
                local &= sep <= np.roll(np.roll(sep, di, axis=0), dj, axis=1)
    cand = sorted(zip(*np.nonzero(local)), key=lambda ij: (sep[ij], ij))
    w = window_deg / resolution_deg
    n = len(ang)
    out = []
    for i, j in cand:
        near = any(min(abs(i - a), n - abs(i - a)) <= w and min(abs(j - b), n - abs(j - b)) <= w
                   for a, b, _ in out)
        if not near:
            out.append((int(i), int(j), float(sep[i, j])))
    return [(float(ang[i]), float(ang[j]), s) for i, j, s in out]


def generate(scene: SyntheticScene | None = None, seed: int = 0) -> SyntheticDataset:
    return SyntheticDataset(scene or SyntheticScene(), seed)


def write_dataset(ds: SyntheticDataset, outdir, binary=True, progress=None):
    """Write ``pose{1,2}/view###.{pgm,ply,json}``, ``pose{1,2}/cloud.ply`` and ``ground_truth.json``."""
    out = Path(outdir)
    for p in (1, 2):
        pdir = out / f"pose{p}"
        pdir.mkdir(parents=True, exist_ok=True)
        seen = np.zeros(len(ds.object.sites), dtype=bool)
        for k, v in enumerate(ds.views(p)):
            stem = pdir / f"view{k:03d}"
            save_pgm(v.image, stem.with_suffix(".pgm"))
            write_ply(v.cloud, stem.with_suffix(".ply"), binary=binary)
            save_camera(v.camera, stem.with_suffix(".json"), angle_deg=v.angle, pose_id=p, view_index=k)
            seen[v.site_index] = True
            if progress:
                progress(p, k)
        ds._covered[p] = np.flatnonzero(seen)
        write_ply(ds.pose_cloud(p, ds._covered[p]), pdir / "cloud.ply", binary=binary)
    inter = ring_intersections(ds.scene)
    save_transform(
        ds.ground_truth, out / "ground_truth.json",
        seed=ds.seed, diameter=ds.scene.diameter, point_noise=ds.scene.point_noise,
        point_spacing=ds.scene.point_spacing,
        ring_intersections=[[a, b] for a, b, _ in inter[:2]],
        scene=ds.scene.describe(),
    )
    return out


def load_ground_truth(path) -> tuple:
    d = json.loads(Path(path).read_text())
    return RigidTransform.from_dict(d), d
