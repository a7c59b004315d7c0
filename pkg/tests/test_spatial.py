import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from turnreg.geom import PointCloud
from turnreg.icp import build_index
from turnreg.spatial import KDTree, brute_force_nn


@pytest.mark.parametrize("backend", ["numba", "numpy"])
def test_single_point(backend):
    t = KDTree([[1.0, 2.0, 3.0]], backend=backend)
    d, i = t.query(np.random.default_rng(0).normal(size=(10, 3)))
    assert np.all(i == 0)
    assert np.allclose(d, np.linalg.norm(np.random.default_rng(0).normal(size=(10, 3)) - [1, 2, 3], axis=1))


@pytest.mark.parametrize("backend", ["numba", "numpy"])
def test_matches_brute_force(backend):
    rng = np.random.default_rng(1)
    pts = rng.uniform(-50, 50, (1000, 3))
    q = rng.uniform(-60, 60, (100, 3))
    d, i = KDTree(pts, backend=backend).query(q)
    bd, bi = brute_force_nn(pts, q)
    assert np.array_equal(i, bi)
    assert np.array_equal(d, bd)


@pytest.mark.parametrize("backend", ["numba", "numpy"])
def test_query_at_existing_point(backend):
    rng = np.random.default_rng(2)
    pts = rng.normal(size=(500, 3))
    d, i = KDTree(pts, backend=backend).query(pts)
    assert np.all(d == 0.0)
    assert np.array_equal(i, np.arange(500))


@pytest.mark.parametrize("backend", ["numba", "numpy"])
def test_duplicates_resolve_to_lowest_index(backend):
    pts = np.array([[0.0, 0, 0], [1.0, 1, 1], [0.0, 0, 0], [1.0, 1, 1]] * 20)
    d, i = KDTree(pts, leaf_size=2, backend=backend).query([[0.1, 0, 0], [0.9, 1, 1]])
    assert list(i) == [0, 1]


def test_backends_agree_on_clustered_data():
    rng = np.random.default_rng(3)
    centres = rng.uniform(-100, 100, (20, 3))
    pts = (centres[:, None, :] + rng.normal(size=(20, 200, 3))).reshape(-1, 3)
    q = rng.uniform(-110, 110, (3000, 3))
    a = KDTree(pts, backend="numba").query(q)
    b = KDTree(pts, backend="numpy").query(q)
    assert np.array_equal(a[1], b[1])
    assert np.array_equal(a[0], b[0])


def test_single_query_returns_scalars():
    t = KDTree(np.eye(3))
    d, i = t.query([0.9, 0.0, 0.0])
    assert isinstance(d, float) and i == 0 and d == pytest.approx(0.1)


def test_points_are_read_only_and_copied():
    pts = np.zeros((4, 3))
    t = KDTree(pts)
    pts[0] = 5.0
    assert np.all(t.points == 0.0)
    with pytest.raises(ValueError):
        t.points[0, 0] = 1.0


def test_empty_rejected():
    with pytest.raises(ValueError):
        KDTree(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        build_index(PointCloud(np.zeros((0, 3))))


def test_two_dimensional_points():
    rng = np.random.default_rng(4)
    pts = rng.uniform(size=(300, 2))
    q = rng.uniform(size=(50, 2))
    assert np.array_equal(KDTree(pts).query(q)[1], brute_force_nn(pts, q)[1])


@settings(max_examples=60, deadline=None)
@given(pts=arrays(np.float64, st.tuples(st.integers(1, 80), st.just(3)),
                  elements=st.floats(-1e3, 1e3, allow_nan=False)),
       q=arrays(np.float64, (7, 3), elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_distance_equals_brute_force_property(pts, q):
    d, i = KDTree(pts, leaf_size=4).query(q)
    bd, _ = brute_force_nn(pts, q)
    assert np.array_equal(d, bd)
    assert np.allclose(np.linalg.norm(pts[i] - q, axis=1), d)
