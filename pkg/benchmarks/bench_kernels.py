"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat N] [--small] [--json out.json]

Every kernel runs once untimed (numba compilation, caches), then the best of
``--repeat`` runs is reported for each backend together with the largest
difference between the two results.
"""
import argparse
import json
import time

import numpy as np

from turnreg.features import detect
from turnreg.features.match import _topk_nb, _topk_np
from turnreg.geom import PinholeCamera, look_at, pixel_rays
from turnreg.image import Image, blur_array
from turnreg.spatial import KDTree
from turnreg.synth import SceneObject, SyntheticScene


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def kdtree_case(n, rng):
    pts = rng.uniform(-50, 50, (n, 3))
    q = rng.uniform(-60, 60, (n, 3))

    def run(backend):
        return lambda: KDTree(pts, backend=backend).query(q)[0]

    return f"kd-tree build + {n} queries", run("numba"), run("numpy")


def topk_case(n, rng):
    d2 = rng.uniform(size=(n, n))
    return f"top-2 of {n}x{n} distances", lambda: _topk_nb(d2, 2), lambda: _topk_np(d2, 2)


def sift_case(size, rng):
    a = blur_array(rng.uniform(size=(size, size)), 2.0)
    img = Image(0.1 + 0.8 * (a - a.min()) / (a.max() - a.min()))

    def run(use_jit):
        return lambda: detect(img, use_jit=use_jit)[0]

    return f"SIFT detect {size}x{size}", run(True), run(False)


def render_cases(size):
    scene = SyntheticScene(width=size, height=size, spacing=1.0)
    obj = SceneObject(scene, 0)
    f = scene.focal_px
    cam = PinholeCamera(f, f, size / 2, size / 2, size, size, look_at((300.0, 0.0, 100.0), (0.0, 0.0, 0.0)))
    v, u = np.mgrid[0:size, 0:size]
    dirs = pixel_rays(cam, u.ravel(), v.ravel())
    origins = np.broadcast_to(cam.center, dirs.shape).copy()

    def trace(use_jit):
        return lambda: np.nan_to_num(obj.trace(origins, dirs, use_jit=use_jit), posinf=0.0)

    pts = obj.sites
    return [
        (f"ray trace {size}x{size}", trace(True), trace(False)),
        (f"texture at {len(pts)} points", lambda: obj.texture(pts, use_jit=True),
         lambda: obj.texture(pts, use_jit=False)),
    ]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--small", action="store_true", help="smaller inputs for a quick check")
    ap.add_argument("--json", help="also write the results here")
    args = ap.parse_args(argv)

    rng = np.random.default_rng(0)
    s = 4 if args.small else 1
    cases = [kdtree_case(200_000 // s, rng), topk_case(2000 // s, rng), sift_case(512 // s, rng)]
    cases += render_cases(256 // s)

    rows = []
    print(f"{'kernel':<34}{'numba s':>10}{'numpy s':>10}{'speedup':>9}{'max diff':>11}")
    for name, jit_fn, np_fn in cases:
        tj, oj = best_of(jit_fn, args.repeat)
        tn, on = best_of(np_fn, args.repeat)
        oj, on = np.asarray(oj, dtype=np.float64), np.asarray(on, dtype=np.float64)
        diff = float(np.max(np.abs(oj - on))) if oj.shape == on.shape and oj.size else float("nan")
        rows.append({"kernel": name, "numba_s": tj, "numpy_s": tn, "speedup": tn / tj, "max_diff": diff})
        print(f"{name:<34}{tj:>10.4f}{tn:>10.4f}{tn / tj:>8.1f}x{diff:>11.2e}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
    return rows


if __name__ == "__main__":
    main()
