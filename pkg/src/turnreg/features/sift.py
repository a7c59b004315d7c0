"""Difference-of-Gaussian keypoints with 128-dim gradient-histogram descriptors.

Parameters follow Lowe's defaults (contrast 0.03 on [0, 1] images, edge
ratio 10, 36-bin orientation histogram, 4x4x8 descriptor clamped at 0.2).
No initial upsampling is done.
"""
import math

import numpy as np

from .._jit import USE_JIT, njit
from ..image import INTERVALS, SIGMA0, Image, build_scale_space

CONTRAST_THRESHOLD = 0.03
EDGE_RATIO = 10.0
BORDER = 5
ORI_BINS = 36
ORI_PEAK_RATIO = 0.8
ORI_SMOOTH_PASSES = 6
DESC_WIDTH = 4
DESC_BINS = 8
DESC_CLAMP = 0.2
MAX_REFINE_STEPS = 5


def find_candidates(dog: np.ndarray, threshold: float, border: int = BORDER):
    """Integer (level, y, x) positions of 3x3x3 extrema in a DoG stack.

    Only inner levels ``1 .. L-2`` are searched and ``|value| > threshold``
    is required.
    """
    n_levels, h, w = dog.shape
    out = []
    b = max(border, 1)
    if h <= 2 * b or w <= 2 * b:
        return np.zeros((0, 3), dtype=np.int64)
    for s in range(1, n_levels - 1):
        c = dog[s, b:h - b, b:w - b]
        nb_max = np.full(c.shape, -np.inf)
        nb_min = np.full(c.shape, np.inf)
        for ds in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    if ds == 0 and dy == 0 and dx == 0:
                        continue
                    nb = dog[s + ds, b + dy:h - b + dy, b + dx:w - b + dx]
                    np.maximum(nb_max, nb, out=nb_max)
                    np.minimum(nb_min, nb, out=nb_min)
        hit = (np.abs(c) > threshold) & (((c > 0) & (c >= nb_max)) | ((c < 0) & (c <= nb_min)))
        ys, xs = np.nonzero(hit)
        out.append(np.stack([np.full(len(ys), s), ys + b, xs + b], axis=1))
    return np.concatenate(out).astype(np.int64) if out else np.zeros((0, 3), dtype=np.int64)


@njit(cache=True)
def _refine_kernel(dog, cand, intervals, contrast, edge_ratio, border):
    n_levels, h, w = dog.shape
    m = cand.shape[0]
    # columns: x, y, s (refined), |response|, ok flag, then an integer cell key
    out = np.zeros((m, 7))
    for k in range(m):
        s = cand[k, 0]
        y = cand[k, 1]
        x = cand[k, 2]
        converged = False
        ox = 0.0
        oy = 0.0
        os_ = 0.0
        dx = dy = ds = 0.0
        dxx = dyy = dxy = 0.0
        for _ in range(MAX_REFINE_STEPS):
            v = dog[s, y, x]
            dx = 0.5 * (dog[s, y, x + 1] - dog[s, y, x - 1])
            dy = 0.5 * (dog[s, y + 1, x] - dog[s, y - 1, x])
            ds = 0.5 * (dog[s + 1, y, x] - dog[s - 1, y, x])
            dxx = dog[s, y, x + 1] + dog[s, y, x - 1] - 2.0 * v
            dyy = dog[s, y + 1, x] + dog[s, y - 1, x] - 2.0 * v
            dss = dog[s + 1, y, x] + dog[s - 1, y, x] - 2.0 * v
            dxy = 0.25 * (dog[s, y + 1, x + 1] - dog[s, y + 1, x - 1]
                          - dog[s, y - 1, x + 1] + dog[s, y - 1, x - 1])
            dxs = 0.25 * (dog[s + 1, y, x + 1] - dog[s + 1, y, x - 1]
                          - dog[s - 1, y, x + 1] + dog[s - 1, y, x - 1])
            dys = 0.25 * (dog[s + 1, y + 1, x] - dog[s + 1, y - 1, x]
                          - dog[s - 1, y + 1, x] + dog[s - 1, y - 1, x])
            # solve H @ off = -g by Cramer's rule
            det = (dxx * (dyy * dss - dys * dys) - dxy * (dxy * dss - dys * dxs)
                   + dxs * (dxy * dys - dyy * dxs))
            if det == 0.0:
                break
            gx, gy, gs = -dx, -dy, -ds
            ox = (gx * (dyy * dss - dys * dys) - dxy * (gy * dss - dys * gs)
                  + dxs * (gy * dys - dyy * gs)) / det
            oy = (dxx * (gy * dss - gs * dys) - gx * (dxy * dss - dys * dxs)
                  + dxs * (dxy * gs - gy * dxs)) / det
            os_ = (dxx * (dyy * gs - gy * dys) - dxy * (dxy * gs - gy * dxs)
                   + gx * (dxy * dys - dyy * dxs)) / det
            if abs(ox) < 0.5 and abs(oy) < 0.5 and abs(os_) < 0.5:
                converged = True
                break
            if abs(ox) > 1e6 or abs(oy) > 1e6 or abs(os_) > 1e6:
                break
            x += int(math.floor(ox + 0.5))
            y += int(math.floor(oy + 0.5))
            s += int(math.floor(os_ + 0.5))
            if s < 1 or s > intervals or x < border or x >= w - border or y < border or y >= h - border:
                break
        if not converged:
            continue
        val = dog[s, y, x] + 0.5 * (dx * ox + dy * oy + ds * os_)
        if abs(val) < contrast:
            continue
        tr = dxx + dyy
        det2 = dxx * dyy - dxy * dxy
        if det2 <= 0.0 or edge_ratio * tr * tr >= (edge_ratio + 1.0) ** 2 * det2:
            continue
        out[k, 0] = x + ox
        out[k, 1] = y + oy
        out[k, 2] = s + os_
        out[k, 3] = abs(val)
        out[k, 4] = 1.0
        out[k, 5] = x
        out[k, 6] = y * 1000.0 + s  # integer cell key, used for de-duplication
    return out


@njit(cache=True)
def _orientation_kernel(img, x, y, sigma):
    h, w = img.shape
    hist = np.zeros(ORI_BINS)
    sw = 1.5 * sigma
    radius = int(math.floor(3.0 * sw + 0.5))
    xi = int(math.floor(x + 0.5))
    yi = int(math.floor(y + 0.5))
    denom = 2.0 * sw * sw
    for dy in range(-radius, radius + 1):
        yy = yi + dy
        if yy <= 0 or yy >= h - 1:
            continue
        for dx in range(-radius, radius + 1):
            xx = xi + dx
            if xx <= 0 or xx >= w - 1:
                continue
            gx = img[yy, xx + 1] - img[yy, xx - 1]
            gy = img[yy + 1, xx] - img[yy - 1, xx]
            mag = math.sqrt(gx * gx + gy * gy)
            ang = math.atan2(gy, gx)
            if ang < 0.0:
                ang += 2.0 * math.pi
            b = int(math.floor(ang * ORI_BINS / (2.0 * math.pi) + 0.5)) % ORI_BINS
            hist[b] += math.exp(-(dx * dx + dy * dy) / denom) * mag
    tmp = np.empty(ORI_BINS)
    for _ in range(ORI_SMOOTH_PASSES):
        for i in range(ORI_BINS):
            tmp[i] = (hist[(i - 1) % ORI_BINS] + hist[i] + hist[(i + 1) % ORI_BINS]) / 3.0
        hist[:] = tmp
    peak = hist.max()
    angles = np.empty(ORI_BINS)
    n = 0
    if peak <= 0.0:
        return angles[:0]
    for i in range(ORI_BINS):
        left = hist[(i - 1) % ORI_BINS]
        right = hist[(i + 1) % ORI_BINS]
        c = hist[i]
        if c > left and c > right and c >= ORI_PEAK_RATIO * peak:
            off = 0.5 * (left - right) / (left - 2.0 * c + right)
            a = (i + off) * 2.0 * math.pi / ORI_BINS
            a = a % (2.0 * math.pi)
            if a >= 2.0 * math.pi:
                a = 0.0
            angles[n] = a
            n += 1
    return angles[:n]


@njit(cache=True)
def _descriptor_kernel(img, x, y, sigma, angle):
    h, w = img.shape
    d = DESC_WIDTH
    nb = DESC_BINS
    hist = np.zeros((d + 2, d + 2, nb + 2))
    hw = 3.0 * sigma
    radius = int(math.floor(hw * math.sqrt(2.0) * (d + 1) * 0.5 + 0.5))
    maxr = int(math.sqrt(h * h + w * w))
    if radius > maxr:
        radius = maxr
    cos_t = math.cos(angle) / hw
    sin_t = math.sin(angle) / hw
    bins_per_rad = nb / (2.0 * math.pi)
    wdenom = 2.0 * (0.5 * d) ** 2
    xi = int(math.floor(x + 0.5))
    yi = int(math.floor(y + 0.5))
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            c_rot = dx * cos_t + dy * sin_t
            r_rot = -dx * sin_t + dy * cos_t
            rbin = r_rot + 0.5 * d - 0.5
            cbin = c_rot + 0.5 * d - 0.5
            if rbin <= -1.0 or rbin >= d or cbin <= -1.0 or cbin >= d:
                continue
            yy = yi + dy
            xx = xi + dx
            if yy <= 0 or yy >= h - 1 or xx <= 0 or xx >= w - 1:
                continue
            gx = img[yy, xx + 1] - img[yy, xx - 1]
            gy = img[yy + 1, xx] - img[yy - 1, xx]
            mag = math.sqrt(gx * gx + gy * gy) * math.exp(-(c_rot * c_rot + r_rot * r_rot) / wdenom)
            ori = math.atan2(gy, gx) - angle
            ori = ori % (2.0 * math.pi)
            obin = ori * bins_per_rad
            r0 = int(math.floor(rbin))
            c0 = int(math.floor(cbin))
            o0 = int(math.floor(obin))
            fr = rbin - r0
            fc = cbin - c0
            fo = obin - o0
            o0 = o0 % nb
            for ir in range(2):
                wr = fr if ir == 1 else 1.0 - fr
                for ic in range(2):
                    wc = fc if ic == 1 else 1.0 - fc
                    for io in range(2):
                        wo = fo if io == 1 else 1.0 - fo
                        hist[r0 + 1 + ir, c0 + 1 + ic, o0 + io] += mag * wr * wc * wo
    out = np.zeros(d * d * nb)
    k = 0
    for r in range(1, d + 1):
        for c in range(1, d + 1):
            hist[r, c, 0] += hist[r, c, nb]
            hist[r, c, 1] += hist[r, c, nb + 1]
            for o in range(nb):
                out[k] = hist[r, c, o]
                k += 1
    norm = math.sqrt((out * out).sum())
    if norm <= 0.0:
        return out
    out /= norm
    for i in range(out.shape[0]):
        if out[i] > DESC_CLAMP:
            out[i] = DESC_CLAMP
    out /= math.sqrt((out * out).sum())
    return out


@njit(cache=True)
def _describe_octave(gauss, kps, sigmas_lvl, levels):
    # one output row per (keypoint, dominant orientation)
    n = kps.shape[0]
    cap = n * 4 + 16
    desc = np.zeros((cap, DESC_WIDTH * DESC_WIDTH * DESC_BINS))
    src = np.zeros(cap, dtype=np.int64)
    ang = np.zeros(cap)
    m = 0
    for k in range(n):
        img = gauss[levels[k]]
        angles = _orientation_kernel(img, kps[k, 0], kps[k, 1], sigmas_lvl[k])
        for a in angles:
            if m == cap:
                newcap = cap * 2
                d2 = np.zeros((newcap, desc.shape[1]))
                d2[:cap] = desc
                s2 = np.zeros(newcap, dtype=np.int64)
                s2[:cap] = src
                a2 = np.zeros(newcap)
                a2[:cap] = ang
                desc, src, ang, cap = d2, s2, a2, newcap
            v = _descriptor_kernel(img, kps[k, 0], kps[k, 1], sigmas_lvl[k], a)
            if v.sum() <= 0.0:
                continue
            desc[m] = v
            src[m] = k
            ang[m] = a
            m += 1
    return desc[:m], src[:m], ang[:m]


def _kernels(use_jit):
    if use_jit:
        return _refine_kernel, _describe_octave
    # interpreter fallback runs the same source without compilation
    return _refine_kernel.py_func, _describe_octave_py


def _describe_octave_py(gauss, kps, sigmas_lvl, levels):
    ori = _orientation_kernel.py_func
    descr = _descriptor_kernel.py_func
    rows, src, angs = [], [], []
    for k in range(len(kps)):
        img = gauss[levels[k]]
        for a in ori(img, kps[k, 0], kps[k, 1], sigmas_lvl[k]):
            v = descr(img, kps[k, 0], kps[k, 1], sigmas_lvl[k], a)
            if v.sum() <= 0.0:
                continue
            rows.append(v)
            src.append(k)
            angs.append(a)
    if not rows:
        return np.zeros((0, 128)), np.zeros(0, dtype=np.int64), np.zeros(0)
    return np.array(rows), np.array(src, dtype=np.int64), np.array(angs)


def detect(img: Image, max_features: int = 1000, contrast_threshold: float = CONTRAST_THRESHOLD,
           edge_ratio: float = EDGE_RATIO, octaves=None, intervals: int = INTERVALS,
           sigma0: float = SIGMA0, use_jit=None):
    """Detect keypoints and compute descriptors.

    Returns ``(keypoints, descriptors)``: keypoints is ``(N, 5)`` float32 with
    columns ``u, v, scale, orientation, response`` in input-image pixels,
    descriptors is ``(N, 128)`` float32 with unit L2 norm. Rows are sorted by
    response, strongest first, and cut at ``max_features``.
    """
    refine, describe = _kernels(USE_JIT if use_jit is None else use_jit)
    ss = build_scale_space(img, octaves=octaves, intervals=intervals, sigma0=sigma0)
    all_kp, all_desc = [], []
    for o in range(ss.n_octaves):
        dog = ss.dogs[o]
        cand = find_candidates(dog, 0.5 * contrast_threshold)
        if len(cand) == 0:
            continue
        ref = refine(dog, cand, intervals, contrast_threshold, edge_ratio, BORDER)
        ref = ref[ref[:, 4] > 0]
        if len(ref) == 0:
            continue
        # several candidates can converge onto the same sample
        _, first = np.unique(ref[:, 5:7], axis=0, return_index=True)
        ref = ref[np.sort(first)]
        sig = sigma0 * 2.0 ** (ref[:, 2] / intervals)
        levels = np.clip(np.floor(ref[:, 2] + 0.5), 0, intervals + 2).astype(np.int64)
        desc, src, ang = describe(ss.gaussians[o], np.ascontiguousarray(ref[:, :2]), sig, levels)
        if len(desc) == 0:
            continue
        scale = 2.0 ** o
        kp = np.column_stack([
            ref[src, 0] * scale, ref[src, 1] * scale, sig[src] * scale, ang, ref[src, 3],
        ])
        all_kp.append(kp)
        all_desc.append(desc)
    if not all_kp:
        return np.zeros((0, 5), dtype=np.float32), np.zeros((0, 128), dtype=np.float32)
    kp = np.concatenate(all_kp)
    desc = np.concatenate(all_desc)
    order = np.lexsort((kp[:, 3], kp[:, 0], kp[:, 1], -kp[:, 4]))[:max_features]
    desc = desc[order]
    desc /= np.linalg.norm(desc, axis=1, keepdims=True)
    return kp[order].astype(np.float32), desc.astype(np.float32)
