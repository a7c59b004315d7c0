import json
import math
import shutil
from pathlib import Path

import numpy as np
import pytest
from conftest import small_scene

from turnreg.geom import (PointCloud, RigidTransform, axis_angle, compose, invert, rot_z,
                          rotation_angle_error)
from turnreg.icp import IcpConfig
from turnreg.pipeline import (CACHE_DIRNAME, DatasetError, RunConfig, align_sequence, align_two_poses, list_views,
                              load_config, load_pose, load_pose_cloud, merge)
from turnreg.register import NoOverlapError
from turnreg.spatial import KDTree
from turnreg.synth import default_pose_change, generate, load_ground_truth, write_dataset

FAST = RunConfig(ransac_threshold=2.0, max_features=300, jobs=1)


def translation_error(a, b):
    return float(np.linalg.norm(a.translation - b.translation))


def copy_dataset(src, dst):
    shutil.copytree(src, dst, ignore=shutil.ignore_patterns(CACHE_DIRNAME))
    return dst


# -- configuration ---------------------------------------------------------------

def test_config_defaults_and_validation():
    cfg = RunConfig()
    assert cfg.ratio == 0.5 and cfg.seed == 0 and cfg.min_inliers == 5 and cfg.cache
    assert cfg.icp == IcpConfig()
    for kw in ({"ratio": 0.0}, {"ratio": 1.0}, {"max_features": 0}, {"jobs": 0}, {"ransac_max_iter": 0},
               {"min_inliers": 2}, {"lift_radius": 0.0}, {"ransac_threshold": -1.0}):
        with pytest.raises(ValueError):
            RunConfig(**kw)


def test_config_dict_round_trip():
    cfg = RunConfig(ratio=0.6, seed=7, icp=IcpConfig(trim_fraction=0.8), cache_dir="/x")
    d = cfg.to_dict()
    assert d["icp_trim_fraction"] == 0.8 and "icp" not in d
    assert RunConfig.from_dict(d) == cfg
    assert json.loads(json.dumps(d)) == d


def test_config_string_coercion_and_unknown_keys():
    cfg = RunConfig.from_dict({"ratio": "0.7", "jobs": "2", "skip_icp": "yes", "icp_max_iterations": "9",
                               "cache_dir": "none"})
    assert cfg.ratio == 0.7 and cfg.jobs == 2 and cfg.skip_icp and cfg.icp.max_iterations == 9
    assert cfg.cache_dir is None
    with pytest.raises(ValueError, match="unknown"):
        RunConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        RunConfig.from_dict({"cache": "maybe"})


def test_replace_ignores_none():
    cfg = RunConfig(seed=3)
    assert cfg.replace(seed=None, ratio=0.4) == RunConfig(seed=3, ratio=0.4)


def test_load_config_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# comment\nratio = 0.65\nicp_trim_fraction = 0.7\nseed=11\n")
    cfg = RunConfig.from_dict(load_config(p))
    assert cfg.ratio == 0.65 and cfg.icp.trim_fraction == 0.7 and cfg.seed == 11
    assert cfg.replace(seed=2).seed == 2
    with pytest.raises(DatasetError):
        load_config(tmp_path / "missing.cfg")
    (tmp_path / "bad.cfg").write_text("no equals sign here\n")
    with pytest.raises(ValueError):
        load_config(tmp_path / "bad.cfg")


# -- ingestion -----------------------------------------------------------------

def test_list_views_ordering_and_names(small_dataset):
    root, scene = small_dataset
    views = list_views(root / "pose1")
    assert [v.index for v in views] == list(range(scene.n_views))
    assert all(v.image.name == f"view{v.index:03d}.pgm" for v in views)


def test_stereo_image_names(small_dataset, tmp_path):
    root, _ = small_dataset
    d = copy_dataset(root / "pose1", tmp_path / "p")
    (d / "view000.pgm").rename(d / "view000_left.pgm")
    shutil.copy(d / "view001.pgm", d / "view001_0.pgm")
    shutil.copy(d / "view002.pgm", d / "view002_right.pgm")
    (d / "view003.pgm").rename(d / "view003_0.pgm")
    shutil.copy(d / "view003_0.pgm", d / "view003_left.pgm")
    views = list_views(d)
    assert views[0].image.name == "view000_left.pgm"
    assert views[1].image.name == "view001.pgm"
    assert views[2].image.name == "view002.pgm"
    assert views[3].image.name == "view003_left.pgm"


def test_missing_and_corrupt_files(small_dataset, tmp_path):
    root, _ = small_dataset
    with pytest.raises(DatasetError, match="not a directory"):
        list_views(tmp_path / "nope")
    (tmp_path / "empty").mkdir()
    with pytest.raises(DatasetError, match="no view"):
        list_views(tmp_path / "empty")

    d = copy_dataset(root / "pose1", tmp_path / "a")
    (d / "view004.ply").unlink()
    with pytest.raises(DatasetError, match="view004.ply"):
        list_views(d)

    d = copy_dataset(root / "pose1", tmp_path / "b")
    (d / "view005.pgm").unlink()
    with pytest.raises(DatasetError, match="view005"):
        list_views(d)

    d = copy_dataset(root / "pose1", tmp_path / "c")
    (d / "view006.pgm").write_bytes(b"P5\n10 10\n255\nxx")
    with pytest.raises(DatasetError, match="view006.pgm"):
        load_pose(d, 1, FAST.replace(cache=False))

    d = copy_dataset(root / "pose1", tmp_path / "d")
    (d / "view007.json").write_text("{not json")
    with pytest.raises(DatasetError, match="view007.json"):
        load_pose(d, 1, FAST.replace(cache=False))

    d = copy_dataset(root / "pose1", tmp_path / "e")
    (d / "view008.ply").write_bytes(b"ply\nformat ascii 1.0\nelement vertex 2\nend_header\n")
    with pytest.raises(DatasetError, match="view008.ply"):
        load_pose(d, 1, FAST.replace(cache=False))


def test_pose_cloud_fallback_is_union_of_part_scans(small_dataset, tmp_path):
    root, _ = small_dataset
    full = load_pose_cloud(root / "pose1")
    d = copy_dataset(root / "pose1", tmp_path / "p")
    (d / "cloud.ply").unlink()
    union = load_pose_cloud(d)
    assert len(union) == len(full)
    a = np.unique(full.points, axis=0)
    b = np.unique(union.points, axis=0)
    assert np.array_equal(a, b)


# -- two-pose alignment ------------------------------------------------------------

@pytest.fixture(scope="module")
def small_run(small_dataset, tmp_path_factory):
    root, scene = small_dataset
    cfg = FAST.replace(cache_dir=str(tmp_path_factory.mktemp("cache")))
    t, report = align_two_poses(root / "pose1", root / "pose2", cfg)
    return t, report, cfg


def test_two_pose_accuracy(small_dataset, small_run):
    root, scene = small_dataset
    gt, _ = load_ground_truth(root / "ground_truth.json")
    t, report, _ = small_run
    assert rotation_angle_error(t, gt) < 0.1
    assert translation_error(t, gt) < 0.01 * scene.diameter
    assert rotation_angle_error(RigidTransform.from_dict(report.ransac), gt) < 1.0


def test_ransac_only_accuracy(small_dataset, small_run):
    root, scene = small_dataset
    gt, _ = load_ground_truth(root / "ground_truth.json")
    _, _, cfg = small_run
    t, report = align_two_poses(root / "pose1", root / "pose2", cfg.replace(skip_icp=True))
    assert report.icp is None
    assert rotation_angle_error(t, gt) < 1.0
    assert translation_error(t, gt) < 0.01 * scene.diameter


def test_report_contents(small_run):
    _, report, cfg = small_run
    d = json.loads(report.to_json())
    expect = cfg.to_dict()
    expect["icp_max_distance"] = "inf"  # strict JSON has no infinity
    assert d["config"] == expect
    assert d["config"]["seed"] == 0
    r = d["ransac"]
    assert r["inlier_ratio"] == len(r["inliers"]) / r["total_matches"]
    assert len(r["inliers"]) >= cfg.min_inliers
    bp = d["best_pair"]
    assert bp["angle1"] == 10.0 * bp["i"] and bp["angle2"] == 10.0 * bp["j"]
    assert bp["matches"] == r["total_matches"]
    assert any(p["i"] == bp["i"] and p["j"] == bp["j"] for p in d["peaks"])
    assert d["icp"]["iterations"] >= 1
    assert d["inputs"]["views"] == [36, 36]
    assert {"features", "overlap", "ransac", "icp"} <= set(d["timing"])
    assert "links" not in d


def test_deterministic_apart_from_timing(small_dataset, small_run):
    root, _ = small_dataset
    _, report, cfg = small_run
    _, again = align_two_poses(root / "pose1", root / "pose2", cfg)
    a, b = report.to_dict(), again.to_dict()
    a.pop("timing"), b.pop("timing")
    assert a == b


def test_feature_cache(small_dataset, small_run, tmp_path):
    root, _ = small_dataset
    t, report, cfg = small_run
    assert report.timing["cache_hits"] == 0
    t2, rep2 = align_two_poses(root / "pose1", root / "pose2", cfg)
    assert rep2.timing["cache_hits"] == 72
    assert np.array_equal(t.matrix, t2.matrix)

    d = copy_dataset(root, tmp_path / "ds")
    align_two_poses(d / "pose1", d / "pose2", cfg.replace(cache=False, skip_icp=True))
    assert not (d / "pose1" / CACHE_DIRNAME).exists()
    align_two_poses(d / "pose1", d / "pose2", FAST.replace(skip_icp=True))
    assert len(list((d / "pose1" / CACHE_DIRNAME).glob("*.safe"))) == 36


def test_corrupt_cache_entry_is_recomputed(small_dataset, small_run):
    root, _ = small_dataset
    t, _, cfg = small_run
    entry = sorted(Path(cfg.cache_dir).glob("*.safe"))[0]
    entry.write_bytes(b"garbage")
    t2, rep = align_two_poses(root / "pose1", root / "pose2", cfg)
    assert rep.timing["cache_hits"] == 71
    assert np.array_equal(t.matrix, t2.matrix)


def test_merged_cloud_overlap_residual(small_dataset):
    root, scene = small_dataset
    ds = generate(scene, 0)
    t, _, cloud = align_two_poses(root / "pose1", root / "pose2", FAST.replace(cache=False), merged=True)
    c1, c2 = load_pose_cloud(root / "pose1"), load_pose_cloud(root / "pose2")
    assert len(cloud) == len(c1) + len(c2)
    assert np.allclose(cloud.points[len(c1):], c2.points)
    # the overlap region is where both rings covered the same object sites
    s1, s2 = ds.covered_sites(1), ds.covered_sites(2)
    common = np.intersect1d(s1, s2)
    part1 = cloud.points[:len(c1)][np.searchsorted(s1, common)]
    part2 = cloud.points[len(c1):][np.searchsorted(s2, common)]
    d, _ = KDTree(part2).query(part1)
    assert np.sqrt(np.mean(d ** 2)) < 2 * scene.point_noise
    # same sites with independent noise along the normal on each side
    paired = np.sqrt(np.mean(np.sum((part1 - part2) ** 2, axis=1)))
    assert paired < 1.1 * math.sqrt(2) * scene.point_noise


def test_identity_pose(identity_dataset):
    root, _ = identity_dataset
    t, report = align_two_poses(root / "pose1", root / "pose2", FAST.replace(cache=False))
    assert report.best_pair["i"] == report.best_pair["j"]
    assert rotation_angle_error(t, RigidTransform.identity()) < 1e-3
    assert np.linalg.norm(t.translation) < 1e-2


def test_disjoint_hemispheres_report_no_overlap(hemisphere_dataset):
    root, ds = hemisphere_dataset
    assert len(np.intersect1d(ds.covered_sites(1), ds.covered_sites(2))) == 0
    with pytest.raises(NoOverlapError, match="min_inliers"):
        align_two_poses(root / "pose1", root / "pose2", FAST.replace(cache=False))


# -- merge -----------------------------------------------------------------------

def test_merge(rng):
    a = PointCloud(rng.normal(size=(10, 3)))
    b = PointCloud(rng.normal(size=(7, 3)))
    assert np.array_equal(merge([a], [RigidTransform.identity()]).points, a.points)
    t = RigidTransform(rot_z(30.0), [1.0, 2.0, 3.0])
    m = merge([a, b], [t, RigidTransform.identity()])
    assert len(m) == 17
    assert np.allclose(m.points[:10], t(a.points))
    with pytest.raises(ValueError):
        merge([a, b], [t])


# -- sequences -------------------------------------------------------------------

def test_two_pose_sequence_reduces_to_align(small_dataset, small_run):
    root, _ = small_dataset
    t, report, cfg = small_run
    ts, seq = align_sequence([root / "pose1", root / "pose2"], cfg)
    assert len(ts) == 2 and np.array_equal(ts[0].matrix, np.eye(4))
    assert np.allclose(ts[1].matrix, invert(t).matrix, atol=1e-12)
    assert len(seq.links) == 1 and seq.links[0]["from"] == 2 and seq.links[0]["to"] == 1
    assert seq.best_pair == report.best_pair


@pytest.fixture(scope="module")
def three_poses(tmp_path_factory):
    """Pose 3 is the same object moved by a further turn about an axis tilted towards y."""
    ga = default_pose_change()
    rel = RigidTransform(axis_angle((0.0, math.sin(math.radians(30)), math.cos(math.radians(30))), 90.0),
                         [-10.0, 5.0, 0.0])
    gb = compose(rel, ga)
    a = write_dataset(generate(small_scene(), 0), tmp_path_factory.mktemp("chain_a"))
    b = write_dataset(generate(small_scene(pose_change=gb), 0), tmp_path_factory.mktemp("chain_b"))
    return [a / "pose1", a / "pose2", b / "pose2"], [ga, gb]


def test_three_pose_chain(three_poses):
    dirs, gts = three_poses
    ts, report, cloud = align_sequence(dirs, FAST.replace(cache=False), merged=True)
    for t, g in zip(ts[1:], gts):
        # pose k maps into pose 1 by the inverse of its pose change
        assert rotation_angle_error(t, invert(g)) < 1.0
        assert translation_error(t, invert(g)) < 1.0
    assert [(link["from"], link["to"]) for link in report.links] == [(2, 1), (3, 2)]
    assert len(cloud) == sum(len(load_pose_cloud(d)) for d in dirs)


def test_sequence_link_failure_names_the_link(three_poses, tmp_path):
    dirs, _ = three_poses
    blank = write_dataset(generate(small_scene(texture_gain=0.0, pixel_noise=0.0), 0), tmp_path)
    with pytest.raises(NoOverlapError, match=r"link 2->3"):
        align_sequence([dirs[0], dirs[1], blank / "pose2"], FAST.replace(cache=False, skip_icp=True))
    with pytest.raises(ValueError):
        align_sequence([dirs[0]])
