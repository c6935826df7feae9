"""Point-cloud primitives: types, metrics, sampling, grouping and clustering.

All coordinates are meters and every point cloud is an ``(N, 3)`` float64
array wrapped in :class:`PointCloud`.  Functions accept either a
``PointCloud`` or anything ``np.asarray`` turns into an ``(N, 3)`` array.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidInputError

WORLD = "world"


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Immutable ordered set of 3-D points tagged with a frame label."""

    points: np.ndarray
    frame: str = WORLD

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise InvalidInputError(f"points must have shape (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise InvalidInputError("points must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return self.points.shape[0]

    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)

    def with_points(self, points) -> "PointCloud":
        """New cloud in the same frame."""
        return PointCloud(points, self.frame)


def as_cloud(data, frame: str | None = None) -> PointCloud:
    if isinstance(data, PointCloud):
        if frame is not None and frame != data.frame:
            return PointCloud(data.points, frame)
        return data
    return PointCloud(data, WORLD if frame is None else frame)


def _pts(data) -> np.ndarray:
    return data.points if isinstance(data, PointCloud) else as_cloud(data).points


def _require_nonempty(pts: np.ndarray, what: str = "cloud"):
    if pts.shape[0] == 0:
        raise InvalidInputError(f"{what} is empty")


def sq_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise squared Euclidean distance, ``dx*dx + dy*dy + dz*dz``.

    The summation order is fixed so that results agree bit-for-bit with a
    scalar loop written the same way.
    """
    d = a - b
    return d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Proper rigid motion ``x -> R @ x + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise InvalidInputError("transform must be finite")
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9 or np.linalg.det(R) <= 0:
            raise InvalidInputError("rotation must be orthonormal with det +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix) -> "RigidTransform":
        M = np.asarray(matrix, dtype=np.float64).reshape(4, 4)
        if not np.allclose(M[3], [0, 0, 0, 1], atol=1e-12):
            raise InvalidInputError("bottom row of a rigid transform must be 0 0 0 1")
        return cls(M[:3, :3], M[:3, 3])

    @classmethod
    def about_z(cls, angle: float, pivot=(0.0, 0.0, 0.0)) -> "RigidTransform":
        """Rotation by ``angle`` about the vertical axis through ``pivot``."""
        c, s = math.cos(angle), math.sin(angle)
        R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        p = np.asarray(pivot, dtype=np.float64)
        return cls(R, p - R @ p)

    @property
    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def apply(self, data, frame: str | None = None):
        """Transform points; returns the same kind that was passed in."""
        if isinstance(data, PointCloud):
            pts = data.points @ self.rotation.T + self.translation
            return PointCloud(pts, data.frame if frame is None else frame)
        pts = np.asarray(data, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    __matmul__ = compose

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def rotation_error(self, other: "RigidTransform") -> float:
        """Frobenius norm of the rotation difference."""
        return float(np.linalg.norm(self.rotation - other.rotation))

    def translation_error(self, other: "RigidTransform") -> float:
        return float(np.linalg.norm(self.translation - other.translation))


# ---------------------------------------------------------------------------
# nearest neighbours and Chamfer distance


def nearest_neighbor(query, cloud) -> tuple[int, float]:
    """Index and squared distance of the point of ``cloud`` closest to ``query``.

    Linear scan; ties go to the lowest index.
    """
    pts = _pts(cloud)
    _require_nonempty(pts)
    q = np.asarray(query, dtype=np.float64).reshape(3)
    d2 = sq_dist(pts, q)
    i = int(np.argmin(d2))
    return i, float(d2[i])


def nearest_sqdist(query, ref, tree: cKDTree | None = None,
                   upper: float | None = None) -> np.ndarray:
    """Squared distance from every query point to its nearest point in ``ref``.

    The kd-tree only selects the neighbour; the distance itself is recomputed
    with :func:`sq_dist` so values match a brute-force scan exactly.  With
    ``upper`` (a squared distance), points farther than that from all of
    ``ref`` report ``inf``.
    """
    q = np.asarray(query.points if isinstance(query, PointCloud) else query, dtype=np.float64)
    r = np.asarray(ref.points if isinstance(ref, PointCloud) else ref, dtype=np.float64)
    if tree is None:
        tree = cKDTree(r)
    if upper is None:
        _, idx = tree.query(q, k=1)
        return sq_dist(q, r[idx])
    bound = math.sqrt(upper) * (1.0 + 1e-9) + 1e-300
    _, idx = tree.query(q, k=1, distance_upper_bound=bound)
    found = idx < r.shape[0]
    out = np.full(q.shape[0], np.inf)
    out[found] = sq_dist(q[found], r[idx[found]])
    return out


def chamfer_terms(a, b, tree_a: cKDTree | None = None, tree_b: cKDTree | None = None):
    """The two directed nearest-neighbour squared-distance arrays (a->b, b->a)."""
    pa, pb = _pts(a), _pts(b)
    _require_nonempty(pa, "first cloud")
    _require_nonempty(pb, "second cloud")
    if isinstance(a, PointCloud) and isinstance(b, PointCloud) and a.frame != b.frame:
        raise InvalidInputError(f"frame mismatch: {a.frame!r} vs {b.frame!r}")
    return nearest_sqdist(pa, pb, tree_b), nearest_sqdist(pb, pa, tree_a)


def chamfer_distance(a, b) -> float:
    """Symmetric sum of squared nearest-neighbour distances.

    Both directed sums are accumulated with ``math.fsum``, so the result is
    independent of point order.
    """
    fwd, bwd = chamfer_terms(a, b)
    return math.fsum(fwd.tolist()) + math.fsum(bwd.tolist())


def chamfer_mean(a, b) -> float:
    """Reporting variant: each directed sum divided by its cloud size."""
    fwd, bwd = chamfer_terms(a, b)
    return math.fsum(fwd.tolist()) / fwd.size + math.fsum(bwd.tolist()) / bwd.size


# ---------------------------------------------------------------------------
# sampling and grouping


def farthest_point_sample(cloud, k: int, seed: int = 0, start: int | None = None) -> np.ndarray:
    """Greedy farthest-point sampling.

    The first index is drawn uniformly from ``seed`` unless ``start`` is
    given. Each following index maximizes the distance to the chosen set,
    lowest index winning ties.
    """
    pts = _pts(cloud)
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise InvalidInputError(f"k must be in [1, {n}], got {k}")
    if start is None:
        start = int(np.random.default_rng(seed).integers(n))
    elif not 0 <= start < n:
        raise InvalidInputError(f"start index {start} out of range")
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = start
    mind = sq_dist(pts, pts[start])
    mind[start] = -1.0
    for i in range(1, k):
        j = int(np.argmax(mind))
        chosen[i] = j
        np.minimum(mind, sq_dist(pts, pts[j]), out=mind)
        mind[chosen[: i + 1]] = -1.0
    return chosen


class PointGroups(NamedTuple):
    centroids: np.ndarray  # (m, 3)
    indices: np.ndarray  # (m, group_size) indices into the cloud
    offsets: np.ndarray  # (m, group_size, 3) points minus their centroid


def knn_group(cloud, centroids, group_size: int) -> PointGroups:
    """The ``group_size`` nearest cloud points of each centroid, centroid-relative."""
    pts = _pts(cloud)
    cen = np.asarray(centroids, dtype=np.float64).reshape(-1, 3)
    if cen.shape[0] == 0:
        raise InvalidInputError("no centroids")
    if not 1 <= group_size <= pts.shape[0]:
        raise InvalidInputError(f"group_size must be in [1, {pts.shape[0]}], got {group_size}")
    d2 = sq_dist(pts[None, :, :], cen[:, None, :])
    idx = np.argsort(d2, axis=1, kind="stable")[:, :group_size]
    return PointGroups(cen, idx, pts[idx] - cen[:, None, :])


def fps_groups(cloud, n_groups: int = 64, group_size: int = 32, seed: int = 0) -> PointGroups:
    """FPS centroids followed by kNN grouping (64 groups of 32 by default)."""
    pts = _pts(cloud)
    centers = pts[farthest_point_sample(pts, n_groups, seed)]
    return knn_group(pts, centers, group_size)


# ---------------------------------------------------------------------------
# k-means


@dataclass(frozen=True, eq=False)
class ClusterSet:
    centroids: np.ndarray
    assignment: np.ndarray
    objective_history: tuple = ()
    iterations: int = 0

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    def objective(self, cloud) -> float:
        pts = _pts(cloud)
        return float(np.sum(sq_dist(pts, self.centroids[self.assignment])))


def _assign(pts, centroids):
    d2 = sq_dist(pts[:, None, :], centroids[None, :, :])
    a = np.argmin(d2, axis=1)
    return a, d2[np.arange(pts.shape[0]), a]


def _repair_empty(pts, centroids, assign, d2):
    """Move the farthest point of the largest cluster into each empty cluster."""
    k = centroids.shape[0]
    counts = np.bincount(assign, minlength=k)
    for c in np.flatnonzero(counts == 0):
        largest = int(np.argmax(counts))
        members = np.flatnonzero(assign == largest)
        far = members[int(np.argmax(d2[members]))]
        assign[far] = c
        d2[far] = 0.0
        centroids[c] = pts[far]
        counts[largest] -= 1
        counts[c] = 1


def kmeans(cloud, k: int, seed: int = 0, max_iters: int = 100, tol: float = 1e-9) -> ClusterSet:
    """Lloyd's algorithm seeded by farthest-point sampling.

    Stops once no centroid moves more than ``tol`` or after ``max_iters``
    updates.  The returned centroids are the means of the returned
    assignment.
    """
    pts = _pts(cloud)
    _require_nonempty(pts)
    n_distinct = np.unique(pts, axis=0).shape[0]
    if not 1 <= k <= n_distinct:
        raise InvalidInputError(f"k must be in [1, {n_distinct}] (distinct points), got {k}")

    centroids = pts[farthest_point_sample(pts, k, seed)].copy()
    history = []
    it = 0
    for it in range(1, max(1, max_iters) + 1):
        assign, d2 = _assign(pts, centroids)
        _repair_empty(pts, centroids, assign, d2)
        history.append(math.fsum(d2))
        sums = np.zeros((k, 3))
        np.add.at(sums, assign, pts)
        new = sums / np.bincount(assign, minlength=k)[:, None]
        shift = float(np.sqrt(np.max(sq_dist(new, centroids))))
        centroids = new
        if shift < tol:
            break
    centroids.setflags(write=False)
    assign.setflags(write=False)
    return ClusterSet(centroids, assign, tuple(history), it)


# ---------------------------------------------------------------------------
# rigid helpers and subsampling


def rotate_z(cloud, angle: float, pivot=(0.0, 0.0, 0.0)):
    """Rotate about the vertical axis through ``pivot``."""
    if not math.isfinite(angle):
        raise InvalidInputError("angle must be finite")
    return RigidTransform.about_z(angle, pivot).apply(
        cloud if isinstance(cloud, PointCloud) else as_cloud(cloud))


def downsample_random(cloud, n: int, seed: int = 0) -> PointCloud:
    """Uniform subsample of exactly ``n`` points without replacement."""
    c = as_cloud(cloud)
    if not 0 <= n <= len(c):
        raise InvalidInputError(f"cannot draw {n} points from {len(c)}")
    idx = np.random.default_rng(seed).choice(len(c), size=n, replace=False)
    return c.with_points(c.points[idx])


def median_spacing(cloud) -> float:
    """Median distance from each point to its nearest other point."""
    pts = _pts(cloud)
    if pts.shape[0] < 2:
        return 0.0
    d, _ = cKDTree(pts).query(pts, k=2)
    return float(np.median(d[:, 1]))
