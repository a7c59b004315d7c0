"""Attach 3D anchors to keypoints via the nearest projected part-scan point."""
import math

import numpy as np

from ..geom import PinholeCamera, PointCloud, project_points
from ..spatial import KDTree

LIFT_RADIUS = 2.0


def lift_to_3d(keypoints, cloud: PointCloud, cam: PinholeCamera, radius: float = LIFT_RADIUS):
    """Return ``(anchors, valid)`` for ``(N, >=2)`` keypoint pixel positions.

    Each keypoint takes the 3D coordinates of the cloud point whose projection
    is nearest in the image, if that projection lies within ``radius`` pixels.
    Keypoints off the object find no such point and come back invalid, which
    doubles as the background filter. There is no occlusion test; the cloud is
    expected to hold only points visible from this view. Invalid anchors are
    zero.
    """
    kp = np.atleast_2d(np.asarray(keypoints, dtype=np.float64))
    n = len(kp)
    anchors = np.zeros((n, 3))
    valid = np.zeros(n, dtype=bool)
    if n == 0 or len(cloud) == 0:
        return anchors, valid
    uv, depth = project_points(cam, cloud.points)
    front = np.flatnonzero(depth > 0)
    if len(front) == 0:
        return anchors, valid
    uv = uv[front]

    # keep only projections that can fall inside some keypoint's radius; a
    # coarse pixel mask around the keypoints gives an exact superset
    pad = int(math.ceil(radius)) + 1
    kx = np.floor(kp[:, 0]).astype(np.int64)
    ky = np.floor(kp[:, 1]).astype(np.int64)
    x0, y0 = kx.min() - pad, ky.min() - pad
    w, h = kx.max() + pad - x0 + 1, ky.max() + pad - y0 + 1
    mask = np.zeros((h, w), dtype=bool)
    for dy in range(-pad, pad + 1):
        for dx in range(-pad, pad + 1):
            mask[ky - y0 + dy, kx - x0 + dx] = True
    px = np.floor(uv[:, 0]).astype(np.int64) - x0
    py = np.floor(uv[:, 1]).astype(np.int64) - y0
    inside = (px >= 0) & (px < w) & (py >= 0) & (py < h)
    near = np.zeros(len(uv), dtype=bool)
    near[inside] = mask[py[inside], px[inside]]
    cand = front[near]
    if len(cand) == 0:
        return anchors, valid
    d, i = KDTree(uv[near]).query(kp[:, :2])
    valid = d <= radius
    anchors[valid] = cloud.points[cand[i[valid]]]
    return anchors, valid
