import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from turnreg.features import FeatureFileError, FeatureSet, detect, extract, lift_to_3d, load_features, match, \
    ratio_test, save_features
from turnreg.features.featio import RECORD, decode_features, encode_features
from turnreg.features.match import _topk_nb, _topk_np
from turnreg.geom import PinholeCamera, PointCloud, RigidTransform, look_at, pixel_rays
from turnreg.image import Image, blur_array


def textured_image(seed, size=128):
    rng = np.random.default_rng(seed)
    a = blur_array(rng.uniform(size=(size, size)), 2.0)
    a = (a - a.min()) / (a.max() - a.min())
    return Image(0.1 + 0.8 * a)


def blob_image(size=64, sigma=4.0):
    y, x = np.mgrid[0:size, 0:size].astype(float)
    c = (size - 1) / 2.0
    return Image(0.1 + 0.8 * np.exp(-((x - c) ** 2 + (y - c) ** 2) / (2 * sigma ** 2))), c


def unit_rows(rng, n, dim=128):
    d = np.abs(rng.normal(size=(n, dim)))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def feature_set(desc, valid=None, anchors=None):
    n = len(desc)
    return FeatureSet(np.zeros((n, 5)), desc, np.zeros((n, 3)) if anchors is None else anchors,
                      np.ones(n, bool) if valid is None else valid)


def brute_force_matches(da, db, ratio):
    out = []
    for i, a in enumerate(np.asarray(da, np.float64)):
        d = np.linalg.norm(np.asarray(db, np.float64) - a, axis=1)
        order = sorted(range(len(d)), key=lambda j: (d[j], j))
        if len(order) >= 2 and d[order[1]] > 0 and d[order[0]] / d[order[1]] < ratio:
            out.append((i, order[0]))
    return out


# -- detection -----------------------------------------------------------------

def test_constant_image_has_no_keypoints():
    kp, desc = detect(Image(np.full((96, 96), 0.4)))
    assert kp.shape == (0, 5) and desc.shape == (0, 128)


def test_gaussian_blob_detected_at_centre_with_matching_scale():
    img, c = blob_image()
    kp, _ = detect(img)
    near = [k for k in kp if math.hypot(k[0] - c, k[1] - c) <= 2.0]
    assert near, kp[:, :3]
    assert any(2.8 <= k[2] <= 5.7 for k in near)


def test_keypoint_invariants_and_descriptor_norms():
    img = textured_image(0)
    kp, desc = detect(img, max_features=200)
    assert 20 < len(kp) <= 200
    assert np.all((kp[:, 0] >= 0) & (kp[:, 0] < img.width) & (kp[:, 1] >= 0) & (kp[:, 1] < img.height))
    assert np.all(kp[:, 2] > 0) and np.all(kp[:, 4] > 0)
    assert np.all((kp[:, 3] >= 0) & (kp[:, 3] < 2 * np.pi))
    assert np.all(np.diff(kp[:, 4]) <= 0)  # strongest first
    assert np.allclose(np.linalg.norm(desc.astype(np.float64), axis=1), 1.0, atol=1e-6)
    assert np.all(desc >= 0)


def test_max_features_truncates_strongest():
    img = textured_image(1)
    kp_all, d_all = detect(img)
    kp, d = detect(img, max_features=10)
    assert np.array_equal(kp, kp_all[:10]) and np.array_equal(d, d_all[:10])


def test_detect_is_deterministic():
    img = textured_image(2)
    a, b = detect(img), detect(img)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_detect_backends_agree():
    img = textured_image(3, 96)
    kj, dj = detect(img, use_jit=True)
    kn, dn = detect(img, use_jit=False)
    assert kj.shape == kn.shape
    assert np.allclose(kj, kn, atol=1e-4)
    assert np.allclose(dj, dn, atol=1e-5)


def repeatability(img):
    kp, _ = detect(img)
    rot = Image(np.rot90(img.data))  # counter-clockwise: (u, v) -> (v, W-1-u)
    kr, _ = detect(rot)
    back = np.column_stack([img.width - 1 - kr[:, 1], kr[:, 0]])
    d = np.linalg.norm(kp[:, None, :2] - back[None, :, :], axis=2)
    return float(np.mean(d.min(axis=1) <= 2.0))


@pytest.mark.parametrize("seed", [0, 1])
def test_rotation_repeatability(seed):
    assert repeatability(textured_image(seed, 160)) >= 0.8


# -- lifting -----------------------------------------------------------------------

def simple_camera():
    return PinholeCamera(200.0, 200.0, 63.5, 63.5, 128, 128, look_at([0.0, -50.0, 0.0], [0.0, 0.0, 0.0]))


def test_lift_exact_pixel_returns_point():
    cam = simple_camera()
    pts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 1.0], [-2.0, 3.0, 0.5]])
    uv = np.array([[63.5, 63.5]])
    anchors, valid = lift_to_3d(uv, PointCloud(pts), cam, 2.0)
    assert valid.tolist() == [True]
    assert np.array_equal(anchors[0], pts[0])


def test_lift_far_keypoint_is_invalid():
    cam = simple_camera()
    anchors, valid = lift_to_3d(np.array([[63.5 + 100, 63.5]]), PointCloud(np.zeros((1, 3))), cam, 2.0)
    assert not valid[0] and np.all(anchors[0] == 0)


def test_lift_empty_inputs():
    cam = simple_camera()
    a, v = lift_to_3d(np.zeros((0, 5)), PointCloud(np.zeros((3, 3))), cam)
    assert a.shape == (0, 3)
    a, v = lift_to_3d(np.zeros((2, 5)), PointCloud(np.zeros((0, 3))), cam)
    assert not v.any()
    a, v = lift_to_3d(np.zeros((2, 5)), PointCloud([[0.0, -60.0, 0.0]]), cam)  # behind the camera
    assert not v.any()


def test_lift_plane_against_ray_oracle():
    rng = np.random.default_rng(4)
    spacing = 0.25
    g = np.arange(-10, 10 + 1e-9, spacing)
    xx, zz = np.meshgrid(g, g)
    # plane y = 0.3 x + 2, sampled on a grid
    pts = np.column_stack([xx.ravel(), 0.3 * xx.ravel() + 2.0, zz.ravel()])
    cam = simple_camera()
    kp = rng.uniform(30, 97, (100, 2))
    anchors, valid = lift_to_3d(kp, PointCloud(pts), cam, 2.0)
    assert valid.all()
    rays = pixel_rays(cam, kp[:, 0], kp[:, 1])
    o = cam.center
    n = np.array([-0.3, 1.0, 0.0])
    t = (2.0 - o @ n) / (rays @ n)
    hit = o + t[:, None] * rays
    err = np.linalg.norm(anchors - hit, axis=1)
    assert err.max() < 2 * spacing * math.sqrt(1 + 0.3 ** 2)
    # anchors are verbatim cloud members
    assert all((pts == a).all(axis=1).any() for a in anchors)


def test_lift_matches_brute_force_projection():
    rng = np.random.default_rng(5)
    cam = simple_camera()
    pts = rng.uniform(-8, 8, (2000, 3))
    kp = rng.uniform(0, 127, (200, 2))
    anchors, valid = lift_to_3d(kp, PointCloud(pts), cam, 1.5)
    from turnreg.geom import project_points
    uv, _ = project_points(cam, pts)
    d = np.linalg.norm(kp[:, None, :] - uv[None, :, :], axis=2)
    best = d.argmin(axis=1)
    assert np.array_equal(valid, d.min(axis=1) <= 1.5)
    assert np.array_equal(anchors[valid], pts[best[valid]])


def test_extract_produces_consistent_featureset():
    img = textured_image(6)
    cam = simple_camera()
    g = np.linspace(-20, 20, 161)
    xx, zz = np.meshgrid(g, g)
    cloud = PointCloud(np.column_stack([xx.ravel(), np.zeros(xx.size), zz.ravel()]))
    fs = extract(img, cloud, cam, max_features=50, pose_id=2, view_index=7)
    assert len(fs) <= 50 and fs.n_valid > 0
    assert (fs.pose_id, fs.view_index) == (2, 7)
    assert np.all(fs.anchors[~fs.valid] == 0)


# -- matching -----------------------------------------------------------------------

def test_ratio_examples():
    a = np.array([[0.0, 0.0]])
    b = np.array([[0.1, 0.0], [0.0, 0.3], [5.0, 5.0]])
    m = ratio_test(a, b, 0.5)
    assert list(m.index_a) == [0] and list(m.index_b) == [0] and m.distance[0] == pytest.approx(0.1)
    b = np.array([[0.2, 0.0], [0.0, 0.3]])
    assert len(ratio_test(a, b, 0.5)) == 0


def test_ratio_test_rejects_bad_ratio():
    with pytest.raises(ValueError):
        ratio_test(np.zeros((1, 2)), np.zeros((2, 2)), 1.0)
    with pytest.raises(ValueError):
        match(feature_set(np.eye(128)[:2]), feature_set(np.eye(128)[:2]), 0.0)


@pytest.mark.parametrize("seed", range(5))
def test_match_equals_brute_force_oracle(seed):
    rng = np.random.default_rng(seed)
    da = unit_rows(rng, 50)
    db = unit_rows(rng, 50)
    db[:10] = da[rng.choice(50, 10, replace=False)] + rng.normal(0, 0.01, (10, 128))
    db = (db / np.linalg.norm(db, axis=1, keepdims=True)).astype(np.float32)
    da = da.astype(np.float32)
    for ratio in (0.5, 0.8, 0.95):
        m = match(feature_set(da), feature_set(db), ratio)
        assert list(zip(m.index_a.tolist(), m.index_b.tolist())) == brute_force_matches(da, db, ratio)


def test_match_skips_invalid_anchors_on_both_sides():
    rng = np.random.default_rng(6)
    d = unit_rows(rng, 20).astype(np.float32)
    va = np.ones(20, bool)
    va[:5] = False
    vb = np.ones(20, bool)
    vb[3] = False
    m = match(feature_set(d, va), feature_set(d, vb), 0.8)
    assert 3 not in m.index_b.tolist()
    assert set(m.index_a.tolist()) == set(range(5, 20)) - {3}
    assert np.all(m.index_a[m.index_a != 3] == m.index_b[m.index_a != 3])


def test_match_needs_two_valid_in_b():
    d = unit_rows(np.random.default_rng(7), 5)
    vb = np.zeros(5, bool)
    vb[0] = True
    assert len(match(feature_set(d), feature_set(d, vb), 0.9)) == 0


def test_match_permits_many_to_one():
    b = np.array([[1.0, 0.0], [0.0, 1.0]])
    a = np.array([[1.0, 0.01], [0.99, 0.0]])
    m = ratio_test(a, b, 0.5)
    assert m.index_b.tolist() == [0, 0]


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), r1=st.floats(0.05, 0.95), r2=st.floats(0.05, 0.95))
def test_match_monotone_in_ratio(seed, r1, r2):
    lo, hi = min(r1, r2), max(r1, r2)
    rng = np.random.default_rng(seed)
    a, b = feature_set(unit_rows(rng, 30)), feature_set(unit_rows(rng, 25))
    small = set(zip(*match(a, b, lo)[:2]))
    large = set(zip(*match(a, b, hi)[:2]))
    assert small <= large


def test_topk_backends_agree_with_ties():
    rng = np.random.default_rng(8)
    d2 = rng.integers(0, 6, (40, 30)).astype(np.float64)
    for k in (1, 2, 3, 30):
        a, b = _topk_nb(d2, k), _topk_np(d2, k)
        assert np.array_equal(a, b)
        oracle = np.array([sorted(range(30), key=lambda j: (row[j], j))[:k] for row in d2])
        assert np.array_equal(a, oracle)


# -- feature files -----------------------------------------------------------------

def random_featureset(rng, n=12):
    kp = rng.uniform(0, 100, (n, 5)).astype(np.float32)
    return FeatureSet(kp, unit_rows(rng, n), rng.normal(size=(n, 3)), rng.uniform(size=n) > 0.3)


def test_feature_file_round_trip(tmp_path):
    fs = random_featureset(np.random.default_rng(9))
    save_features(fs, tmp_path / "f.safe")
    back = load_features(tmp_path / "f.safe", pose_id=1, view_index=3)
    for name in ("keypoints", "descriptors", "anchors", "valid"):
        assert np.array_equal(getattr(back, name), getattr(fs, name))
    assert (back.pose_id, back.view_index) == (1, 3)


def test_feature_file_layout():
    fs = random_featureset(np.random.default_rng(10), 3)
    buf = encode_features(fs)
    assert buf[:4] == b"SAFE"
    assert struct.unpack_from("<II", buf, 4) == (1, 3)
    assert RECORD.itemsize == 5 * 4 + 1 + 3 * 8 + 128 * 4
    assert len(buf) == 12 + 3 * RECORD.itemsize
    u = struct.unpack_from("<f", buf, 12)[0]
    assert u == fs.keypoints[0, 0]
    x = struct.unpack_from("<d", buf, 12 + 21)[0]
    assert x == fs.anchors[0, 0]


@pytest.mark.parametrize("mutate", [
    lambda b: b"SAFF" + b[4:],
    lambda b: b[:8],
    lambda b: b[:4] + struct.pack("<I", 9) + b[8:],
    lambda b: b[:-1],
])
def test_feature_file_errors(mutate):
    buf = encode_features(random_featureset(np.random.default_rng(11), 2))
    with pytest.raises(FeatureFileError):
        decode_features(mutate(buf))


def test_featureset_length_check():
    with pytest.raises(ValueError):
        FeatureSet(np.zeros((2, 5)), np.zeros((3, 128)), np.zeros((2, 3)), np.ones(2, bool))
