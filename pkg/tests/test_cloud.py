import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from claysculpt.cloud import (PointCloud, RigidTransform, chamfer_distance, chamfer_mean, downsample_random,
                              farthest_point_sample, fps_groups, kmeans, knn_group, median_spacing,
                              nearest_neighbor, rotate_z)
from claysculpt.errors import InvalidInputError
from oracles import brute_chamfer, brute_nearest, fps_oracle, rotation_about

coords = st.floats(-1, 1, allow_nan=False, width=64)


def clouds(max_n=40):
    return st.integers(1, max_n).flatmap(lambda n: arrays(np.float64, (n, 3), elements=coords))


# --- types -------------------------------------------------------------------


def test_pointcloud_rejects_nonfinite_and_bad_shape():
    with pytest.raises(InvalidInputError):
        PointCloud([[0.0, np.nan, 0.0]])
    with pytest.raises(InvalidInputError):
        PointCloud(np.zeros((3, 2)))


def test_pointcloud_is_read_only():
    c = PointCloud(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        c.points[0, 0] = 1.0


def test_rigid_transform_validation_and_algebra():
    with pytest.raises(InvalidInputError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    rng = np.random.default_rng(0)
    A = RigidTransform(rotation_about(rng.normal(size=3), 0.7), rng.normal(size=3))
    B = RigidTransform(rotation_about(rng.normal(size=3), -1.3), rng.normal(size=3))
    p = rng.normal(size=(10, 3))
    np.testing.assert_allclose((A @ B).apply(p), A.apply(B.apply(p)), atol=1e-12)
    np.testing.assert_allclose(A.inverse().apply(A.apply(p)), p, atol=1e-12)
    M = RigidTransform.from_matrix(A.matrix)
    assert M.rotation_error(A) == 0.0 and M.translation_error(A) == 0.0


# --- chamfer -----------------------------------------------------------------


def test_chamfer_examples():
    assert chamfer_distance([[0, 0, 0]], [[1, 0, 0]]) == 2.0
    assert chamfer_distance([[0, 0, 0], [2, 0, 0]], [[1, 0, 0]]) == 3.0
    a = np.random.default_rng(1).normal(size=(50, 3))
    assert chamfer_distance(a, a) == 0.0


def test_chamfer_errors():
    with pytest.raises(InvalidInputError):
        chamfer_distance(np.zeros((0, 3)), [[0, 0, 0]])
    with pytest.raises(InvalidInputError):
        chamfer_distance(PointCloud([[0, 0, 0]], "a"), PointCloud([[0, 0, 0]], "b"))


@given(clouds(), clouds())
def test_chamfer_matches_brute_force_exactly(a, b):
    assert chamfer_distance(a, b) == brute_chamfer(a, b)


@given(clouds(), clouds())
def test_chamfer_symmetric(a, b):
    assert chamfer_distance(a, b) == chamfer_distance(b, a)


def test_chamfer_ties_on_grid():
    g = np.stack(np.meshgrid(*[np.arange(4.0)] * 3), -1).reshape(-1, 3)
    h = g + 0.5
    assert chamfer_distance(g, h) == brute_chamfer(g, h)


@given(clouds(20), clouds(20), st.floats(-math.pi, math.pi), arrays(np.float64, 3, elements=coords))
def test_chamfer_rigid_invariance(a, b, angle, t):
    T = RigidTransform(rotation_about([0.3, -0.2, 0.9], angle), t)
    ref = chamfer_distance(a, b)
    got = chamfer_distance(T.apply(a), T.apply(b))
    assert abs(got - ref) <= 1e-9 * max(ref, 1e-12) + 1e-12


@given(clouds(), clouds())
def test_chamfer_permutation_invariant(a, b):
    rng = np.random.default_rng(len(a) * 31 + len(b))
    assert chamfer_distance(a[rng.permutation(len(a))], b) == chamfer_distance(a, b)


def test_chamfer_mean_divides_each_direction():
    a = [[0, 0, 0], [2, 0, 0]]
    b = [[1, 0, 0]]
    assert chamfer_mean(a, b) == pytest.approx(2 / 2 + 1 / 1)


# --- nearest neighbour -------------------------------------------------------


def test_nearest_neighbor_tie_breaks_low_index():
    pts = np.array([[5, 5, 5], [9, 9, 9], [1, 0, 0], [7, 7, 7], [8, 8, 8], [-1, 0, 0]], float)
    assert nearest_neighbor([0, 0, 0], pts) == (2, 1.0)


def test_nearest_neighbor_matches_linear_scan():
    rng = np.random.default_rng(2)
    pts = rng.uniform(-1, 1, (1000, 3))
    for q in rng.uniform(-1, 1, (100, 3)):
        assert nearest_neighbor(q, pts) == brute_nearest(q.tolist(), pts)


def test_nearest_neighbor_self_and_empty():
    pts = np.random.default_rng(3).normal(size=(20, 3))
    assert nearest_neighbor(pts[7], pts) == (7, 0.0)
    with pytest.raises(InvalidInputError):
        nearest_neighbor([0, 0, 0], np.zeros((0, 3)))


# --- FPS and grouping --------------------------------------------------------


def test_fps_examples():
    pts = np.array([[0, 0, 0], [1, 0, 0], [10, 0, 0]], float)
    assert sorted(farthest_point_sample(pts, 2, start=0).tolist()) == [0, 2]
    assert sorted(farthest_point_sample(pts, 3, seed=4).tolist()) == [0, 1, 2]
    one = farthest_point_sample(pts, 1, seed=9)
    assert one.tolist() == [int(np.random.default_rng(9).integers(3))]
    with pytest.raises(InvalidInputError):
        farthest_point_sample(pts, 0)
    with pytest.raises(InvalidInputError):
        farthest_point_sample(pts, 4)


@given(clouds(24), st.integers(1, 6), st.integers(0, 1000))
def test_fps_matches_oracle(pts, k, seed):
    k = min(k, len(pts))
    got = farthest_point_sample(pts, k, seed)
    assert got.tolist() == fps_oracle(pts, k, int(got[0]))


@given(clouds(64), st.integers(0, 100))
def test_fps_k2_pairs_start_with_its_farthest_point(pts, seed):
    idx = farthest_point_sample(pts, 2, seed) if len(pts) >= 2 else None
    if idx is None:
        return
    d = ((pts - pts[idx[0]]) ** 2).sum(1)
    d[idx[0]] = -1
    assert d[idx[1]] == d.max()


def test_knn_group_examples():
    pts = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0]], float)
    g = knn_group(pts, [[0, 0, 0]], 4)
    assert sorted(g.indices[0].tolist()) == [0, 1, 2, 3]
    np.testing.assert_array_equal(g.offsets[0], pts[g.indices[0]])
    with pytest.raises(InvalidInputError):
        knn_group(pts, [[0, 0, 0]], 5)
    dup = np.vstack([pts, pts])
    assert knn_group(dup, [[1, 0, 0], [-1, 0, 0]], 3).indices.shape == (2, 3)


def test_fps_groups_default_layout():
    from claysculpt.sim import make_initial_clay
    g = fps_groups(make_initial_clay(2048, 0), 64, 32, seed=0)
    assert g.centroids.shape == (64, 3) and g.indices.shape == (64, 32) and g.offsets.shape == (64, 32, 3)


# --- k-means -----------------------------------------------------------------


def test_kmeans_k1_is_mean():
    pts = np.random.default_rng(4).normal(size=(100, 3))
    cs = kmeans(pts, 1)
    np.testing.assert_allclose(cs.centroids[0], pts.mean(0), atol=1e-12)


def test_kmeans_two_blobs():
    rng = np.random.default_rng(5)
    a = rng.normal(0, 0.01, (50, 3))
    b = rng.normal(0, 0.01, (50, 3)) + [1.0, 0, 0]
    cs = kmeans(np.vstack([a, b]), 2, seed=3)
    got = sorted(cs.centroids.tolist())
    np.testing.assert_allclose(got[0], a.mean(0), atol=1e-9)
    np.testing.assert_allclose(got[1], b.mean(0), atol=1e-9)


def test_kmeans_k_equals_n_and_errors():
    pts = np.random.default_rng(6).normal(size=(12, 3))
    cs = kmeans(pts, 12)
    assert sorted(cs.assignment.tolist()) == list(range(12))
    np.testing.assert_allclose(cs.centroids[cs.assignment], pts, atol=0)
    with pytest.raises(InvalidInputError):
        kmeans(np.vstack([pts[:2]] * 3), 3)


@given(clouds(60), st.integers(1, 8), st.integers(0, 50))
def test_kmeans_invariants(pts, k, seed):
    distinct = np.unique(pts, axis=0).shape[0]
    k = min(k, distinct)
    cs = kmeans(pts, k, seed)
    counts = np.bincount(cs.assignment, minlength=k)
    assert np.all(counts > 0)
    hist = np.array(cs.objective_history)
    assert np.all(np.diff(hist) <= 1e-12 * max(1.0, hist.max()))
    for c in range(k):
        np.testing.assert_allclose(cs.centroids[c], pts[cs.assignment == c].mean(0), atol=1e-12)


# --- rotation and downsampling -----------------------------------------------


def test_rotate_z_examples():
    np.testing.assert_allclose(rotate_z([[1, 0, 0]], math.pi / 2).points, [[0, 1, 0]], atol=1e-15)
    pts = np.random.default_rng(7).normal(size=(30, 3))
    c = PointCloud(pts)
    for _ in range(60):
        c = rotate_z(c, math.radians(6), (0.1, -0.2, 0))
    assert np.max(np.abs(c.points - pts)) < 1e-9


@given(clouds(30), st.floats(-10, 10))
def test_rotate_z_preserves_distances(pts, angle):
    out = rotate_z(pts, angle, (0.3, 0.1, 0.0)).points
    d0 = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    d1 = np.linalg.norm(out[:, None] - out[None], axis=-1)
    assert np.max(np.abs(d0 - d1)) <= 1e-12 * 10


def test_downsample_random():
    pts = np.random.default_rng(8).normal(size=(10000, 3))
    d = downsample_random(pts, 2048, seed=1)
    assert len(d) == 2048
    members = {tuple(p) for p in pts.tolist()}
    assert all(tuple(p) in members for p in d.points.tolist())
    np.testing.assert_array_equal(d.points, downsample_random(pts, 2048, seed=1).points)
    full = downsample_random(pts[:50], 50, seed=2).points
    assert sorted(map(tuple, full.tolist())) == sorted(map(tuple, pts[:50].tolist()))
    with pytest.raises(InvalidInputError):
        downsample_random(pts[:5], 6)


def test_median_spacing_grid():
    g = np.stack(np.meshgrid(*[np.arange(5.0)] * 3), -1).reshape(-1, 3) * 0.01
    assert median_spacing(g) == pytest.approx(0.01)
