"""Command line interface: ``turnreg <subcommand> ...``.

Exit codes: 0 success, 2 no overlap between poses, 3 input/output error,
4 degenerate geometry, 1 anything else (bad arguments included).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .features import FeatureFileError, extract, save_features
from .geom import GeomFileError, RigidTransform, load_camera, load_transform
from .icp import icp_refine
from .image import PgmError, load_pgm
from .pipeline import (DatasetError, RunConfig, align_sequence, align_two_poses, load_config, load_pose,
                       load_pose_cloud)
from .ply import PlyError, read_ply, write_ply
from .register import (DegenerateGeometryError, NoOverlapError, best_pair, correspondences, find_peaks,
                       overlap_matrix, ransac_rigid)

EXIT_OK, EXIT_ERROR, EXIT_NO_OVERLAP, EXIT_IO, EXIT_DEGENERATE = 0, 1, 2, 3, 4

log = logging.getLogger("turnreg")

# flag name -> RunConfig key
_RUN_FLAGS = {
    "ratio": ("ratio", float, "ratio-test threshold"),
    "max_features": ("max-features", int, "keypoints kept per image"),
    "lift_radius": ("lift-radius", float, "pixel radius for lifting keypoints to 3D"),
    "ransac_threshold": ("ransac-threshold", float, "inlier distance"),
    "ransac_confidence": ("ransac-confidence", float, "adaptive stopping confidence"),
    "ransac_max_iter": ("ransac-max-iter", int, "iteration cap"),
    "seed": ("seed", int, "RANSAC seed"),
    "min_inliers": ("min-inliers", int, "smallest RANSAC consensus accepted as overlap"),
    "icp_trim_fraction": ("icp-trim", float, "fraction of closest ICP pairs kept"),
    "icp_max_iterations": ("icp-max-iterations", int, "ICP iteration cap"),
    "icp_convergence": ("icp-convergence", float, "RMS movement per iteration that ends ICP"),
    "icp_max_distance": ("icp-max-distance", float, "ignore ICP pairs farther than this"),
    "icp_max_points": ("icp-max-points", int, "subsampling target for --icp-subsample"),
    "jobs": ("jobs", int, "worker threads"),
    "cache_dir": ("cache-dir", str, "feature cache directory"),
}
_RUN_SWITCHES = {
    "skip_icp": ("skip-icp", "stop after RANSAC"),
    "icp_subsample": ("icp-subsample", "stride-subsample the moving cloud"),
}


def _add_run_flags(p):
    g = p.add_argument_group("run configuration (flags override --config)")
    g.add_argument("--config", type=Path, help="key = value file with RunConfig fields")
    for key, (flag, typ, help_) in _RUN_FLAGS.items():
        g.add_argument("--" + flag, dest=key, type=typ, default=None, help=help_)
    for key, (flag, help_) in _RUN_SWITCHES.items():
        g.add_argument("--" + flag, dest=key, action="store_const", const=True, default=None, help=help_)
    g.add_argument("--no-cache", dest="cache", action="store_const", const=False, default=None,
                   help="do not read or write the feature cache")
    g.add_argument("--icp-no-accelerate", dest="icp_accelerate", action="store_const", const=False, default=None,
                   help="plain trimmed ICP steps, no extrapolation")


def _run_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg = RunConfig.from_dict(load_config(args.config), cfg)
    keys = list(_RUN_FLAGS) + list(_RUN_SWITCHES) + ["cache", "icp_accelerate"]
    return cfg.replace(**{k: getattr(args, k, None) for k in keys})


def _emit(text: str, out):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _dump(d) -> str:
    return json.dumps(d, indent=2, sort_keys=True) + "\n"


# -- subcommands -------------------------------------------------------------------

def cmd_synth(args):
    from .synth import SyntheticScene, generate, write_dataset

    kw = {}
    for k in ("surface", "width", "height", "spacing", "point_noise", "pixel_noise", "grid_amplitude",
              "texture_repeats", "shading"):
        v = getattr(args, k)
        if v is not None:
            kw[k] = v
    if args.step is not None:
        kw["angular_step"] = args.step
    if args.identity:
        kw["pose_change"] = RigidTransform.identity()
    elif args.pose is not None:
        kw["pose_change"] = load_transform(args.pose)
    scene = SyntheticScene(**kw)
    ds = generate(scene, args.seed)
    n = scene.n_views

    def progress(p, k):
        log.info("pose %d view %d/%d", p, k + 1, n)

    write_dataset(ds, args.outdir, binary=not args.ascii, progress=progress)
    print(args.outdir)
    return EXIT_OK


def cmd_detect(args):
    image = load_pgm(args.image)
    cloud = read_ply(args.cloud)
    cam = load_camera(args.camera)
    fs = extract(image, cloud, cam, max_features=args.max_features, radius=args.lift_radius)
    save_features(fs, args.out)
    print(f"{len(fs.keypoints)} keypoints, {fs.n_valid} lifted -> {args.out}")
    return EXIT_OK


def _load_pair(args, cfg):
    return load_pose(args.dir1, 1, cfg), load_pose(args.dir2, 2, cfg)


def cmd_overlap(args):
    cfg = _run_config(args)
    p1, p2 = _load_pair(args, cfg)
    m = overlap_matrix(p1.sequence, p2.sequence, cfg.ratio, jobs=cfg.jobs)
    if args.csv:
        m.to_csv(args.csv)
    if args.pgm:
        m.to_pgm(args.pgm)
    peaks = find_peaks(m.counts, step_deg=p1.sequence.step)
    out = {"shape": list(m.counts.shape), "max": int(m.counts.max()),
           "peaks": [{"i": i, "j": j, "angle1": float(p1.sequence.angles[i]),
                      "angle2": float(p2.sequence.angles[j]), "count": c} for i, j, c in peaks]}
    i, j = best_pair(m)
    out["best_pair"] = {"i": int(i), "j": int(j)}
    _emit(_dump(out), args.out)
    return EXIT_OK


def cmd_estimate(args):
    cfg = _run_config(args)
    p1, p2 = _load_pair(args, cfg)
    if args.pair is not None:
        i, j = args.pair
    else:
        i, j = best_pair(overlap_matrix(p1.sequence, p2.sequence, cfg.ratio, jobs=cfg.jobs))
    cs = correspondences(p1.sequence.features[i], p2.sequence.features[j], cfg.ratio)
    rr = ransac_rigid(cs.p, cs.q, threshold=cfg.ransac_threshold, confidence=cfg.ransac_confidence,
                      max_iter=cfg.ransac_max_iter, seed=cfg.seed)
    _emit(_dump(rr.to_dict()), args.out)
    return EXIT_OK


def cmd_refine(args):
    cfg = _run_config(args)
    moving = load_pose_cloud(args.moving) if Path(args.moving).is_dir() else read_ply(args.moving)
    fixed = load_pose_cloud(args.fixed) if Path(args.fixed).is_dir() else read_ply(args.fixed)
    init = load_transform(args.init) if args.init else RigidTransform.identity()
    res = icp_refine(moving, fixed, init, cfg.icp)
    _emit(_dump(res.to_dict()), args.out)
    return EXIT_OK


def cmd_align(args):
    cfg = _run_config(args)
    if args.merge_out:
        _, report, cloud = align_two_poses(args.dir1, args.dir2, cfg, merged=True)
        write_ply(cloud, args.merge_out)
    else:
        _, report = align_two_poses(args.dir1, args.dir2, cfg)
    _emit(report.to_json(), args.out)
    return EXIT_OK


def cmd_align_seq(args):
    cfg = _run_config(args)
    if args.merge_out:
        _, report, cloud = align_sequence(args.dirs, cfg, merged=True)
        write_ply(cloud, args.merge_out)
    else:
        _, report = align_sequence(args.dirs, cfg)
    _emit(report.to_json(), args.out)
    return EXIT_OK


# -- entry point -----------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # argparse would exit with 2, which is reserved for "no overlap"
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="turnreg", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic two-pose dataset")
    p.add_argument("outdir", type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--surface", choices=["sphere", "torus", "plaque"])
    p.add_argument("--step", type=float, help="turntable step in degrees")
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--spacing", type=float, help="surface point spacing (default diameter / 500)")
    p.add_argument("--point-noise", type=float)
    p.add_argument("--pixel-noise", type=float)
    p.add_argument("--grid-amplitude", type=float, help="strength of the fine cosine grid texture")
    p.add_argument("--repeats", dest="texture_repeats", type=int,
                   help="copies of the texture around the turntable axis (repetitive object)")
    p.add_argument("--shading", type=float)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--identity", action="store_true", help="pose 2 equals pose 1")
    g.add_argument("--pose", type=Path, help="pose change transform JSON")
    p.add_argument("--ascii", action="store_true", help="write ASCII PLY")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("detect", help="detect and lift features of one view")
    p.add_argument("image", type=Path)
    p.add_argument("cloud", type=Path)
    p.add_argument("camera", type=Path)
    p.add_argument("-o", "--out", type=Path, required=True)
    p.add_argument("--max-features", type=int, default=1000)
    p.add_argument("--lift-radius", type=float, default=2.0)
    p.set_defaults(func=cmd_detect)

    for name, func, help_ in (("overlap", cmd_overlap, "overlap matrix between two poses"),
                              ("estimate", cmd_estimate, "RANSAC transform from the best view pair"),
                              ("align", cmd_align, "end-to-end alignment of two poses")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("dir1", type=Path)
        p.add_argument("dir2", type=Path)
        p.add_argument("--out", type=Path, help="write JSON here instead of stdout")
        _add_run_flags(p)
        p.set_defaults(func=func)
        if name == "overlap":
            p.add_argument("--csv", type=Path)
            p.add_argument("--pgm", type=Path)
        elif name == "estimate":
            p.add_argument("--pair", type=int, nargs=2, metavar=("I", "J"), help="view pair instead of the best")
        else:
            p.add_argument("--merge-out", type=Path, help="write the fused cloud (pose-2 frame) as PLY")

    p = sub.add_parser("refine", help="trimmed ICP between two clouds (PLY files or pose directories)")
    p.add_argument("moving", type=Path)
    p.add_argument("fixed", type=Path)
    p.add_argument("--init", type=Path, help="initial transform JSON")
    p.add_argument("--out", type=Path)
    _add_run_flags(p)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("align-seq", help="chain-align several poses into the first pose's frame")
    p.add_argument("dirs", type=Path, nargs="+")
    p.add_argument("--out", type=Path)
    p.add_argument("--merge-out", type=Path, help="write the fused cloud (pose-1 frame) as PLY")
    _add_run_flags(p)
    p.set_defaults(func=cmd_align_seq)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:  # --help or a usage error
        return exc.code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except NoOverlapError as exc:
        print(f"error: no overlap: {exc}", file=sys.stderr)
        return EXIT_NO_OVERLAP
    except DegenerateGeometryError as exc:
        print(f"error: degenerate geometry: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (OSError, PgmError, PlyError, FeatureFileError, GeomFileError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
