"""Rigid multi-view registration: RANSAC coarse alignment, ICP refinement, view fusion."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .cloud import PointCloud, RigidTransform, WORLD, as_cloud
from .errors import InvalidInputError, NoSolutionError, StallError

DEGENERATE_AREA = 1e-12


@dataclass(frozen=True)
class Correspondence:
    source_index: int
    target_index: int
    residual: float

    def __post_init__(self):
        if self.source_index < 0 or self.target_index < 0:
            raise InvalidInputError("correspondence indices must be non-negative")
        if not self.residual >= 0:
            raise InvalidInputError("residual must be >= 0")


@dataclass(frozen=True, eq=False)
class RegistrationResult:
    """Recovered source-to-target transform plus fit statistics.

    ``inliers`` lists the source indices counted in ``inlier_count``.
    """

    transform: RigidTransform
    inlier_count: int
    rms_error: float
    iterations: int
    inliers: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    rms_history: tuple = ()

    def correspondences(self, source, target) -> list:
        """Nearest-neighbour pairs of the inlier source points under ``transform``."""
        src = as_cloud(source).points[self.inliers]
        tgt = as_cloud(target).points
        d, j = cKDTree(tgt).query(self.transform.apply(src))
        return [Correspondence(int(i), int(t), float(r)) for i, t, r in zip(self.inliers, j, d)]


def triangle_area(p: np.ndarray) -> float:
    return 0.5 * float(np.linalg.norm(np.cross(p[1] - p[0], p[2] - p[0])))


def procrustes(src, dst, weights=None) -> RigidTransform:
    """Least-squares rigid transform mapping ``src`` rows onto ``dst`` rows (Kabsch).

    A reflection in the SVD solution is corrected so the result is always a
    proper rotation.
    """
    a = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if a.shape != b.shape or a.shape[0] == 0:
        raise InvalidInputError("procrustes needs equally sized, non-empty point sets")
    w = np.ones(a.shape[0]) if weights is None else np.asarray(weights, float)
    w = w / w.sum()
    ca = w @ a
    cb = w @ b
    H = (a - ca).T @ ((b - cb) * w[:, None])
    U, _, Vt = np.linalg.svd(H)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ D @ U.T
    return RigidTransform(R, cb - R @ ca)


@dataclass(frozen=True)
class RansacParams:
    iterations: int = 1000
    inlier_threshold: float = 0.005
    sample_size: int = 3
    seed: int = 0
    refit_rounds: int = 30
    polish_iters: int = 30
    polish_schedule: tuple = (0.05, 0.02)
    # scoring uses at most this many source points (an evenly strided subset)
    score_points: int = 1024

    def __post_init__(self):
        if self.iterations < 1 or self.inlier_threshold <= 0:
            raise InvalidInputError("RANSAC needs iterations >= 1 and a positive inlier threshold")
        if self.sample_size != 3:
            raise InvalidInputError("sample_size is fixed at 3")


@dataclass(frozen=True)
class IcpParams:
    max_iters: int = 50
    convergence_tol: float = 1e-10
    max_correspondence_dist: float = 0.01

    def __post_init__(self):
        if self.max_iters < 1 or self.max_correspondence_dist <= 0 or self.convergence_tol < 0:
            raise InvalidInputError("invalid ICP parameters")


def _principal_frame(pts: np.ndarray):
    """Trimmed center and principal axes (columns, largest variance first)."""
    center = np.median(pts, axis=0)
    r = np.linalg.norm(pts - center, axis=1)
    core = pts[r <= 2.5 * np.median(r)] if pts.shape[0] > 10 else pts
    center = core.mean(axis=0)
    _, vecs = np.linalg.eigh(np.cov((core - center).T))
    return center, vecs[:, ::-1]


def _pre_alignments(src: np.ndarray, dst: np.ndarray, init: RigidTransform | None) -> list:
    """Starting guesses for putative matching.

    The initial guess (identity if none), the centroid shift, and the four
    proper principal-axis alignments.
    """
    hyps = [init or RigidTransform.identity()]
    moved = hyps[0].apply(src)
    hyps.append(RigidTransform(hyps[0].rotation,
                               hyps[0].translation + dst.mean(axis=0) - moved.mean(axis=0)))
    if src.shape[0] >= 4 and dst.shape[0] >= 4:
        cs, es = _principal_frame(src)
        ct, et = _principal_frame(dst)
        for signs in ((1, 1, 1), (1, -1, -1), (-1, 1, -1), (-1, -1, 1)):
            ei = es * np.asarray(signs, float)
            R = et @ ei.T
            if np.linalg.det(R) < 0:
                R = et @ (ei * np.array([1.0, 1.0, -1.0])).T
            hyps.append(RigidTransform(R, ct - R @ cs))
    return hyps


def _inliers(tree: cKDTree, moved: np.ndarray, threshold: float):
    d, j = tree.query(moved, distance_upper_bound=threshold)
    ok = np.isfinite(d) & (d <= threshold)
    return ok, j, d


def ransac_align(source, target, params: RansacParams = RansacParams(),
                 init: RigidTransform | None = None) -> RegistrationResult:
    """Coarse rigid alignment of ``source`` onto ``target``.

    Putative matches are nearest neighbours under each pre-alignment guess.
    Every iteration draws three of them, fits a rigid transform and counts
    source points landing within ``inlier_threshold`` of the target.  The
    best hypothesis (ties: earliest iteration) is refit on its inliers until
    the inlier set stops changing.

    Raises
    ------
    NoSolutionError
        Every sampled triple was degenerate (triangle area below 1e-12 m²).
    """
    src = as_cloud(source).points
    dst = as_cloud(target).points
    if src.shape[0] < 3 or dst.shape[0] < 3:
        raise InvalidInputError("RANSAC needs at least 3 points in each cloud")
    tree = cKDTree(dst)
    thr = params.inlier_threshold
    stride = max(1, math.ceil(src.shape[0] / params.score_points))
    probe = src[::stride]

    # each pre-alignment is polished by a short coarse ICP; the polished
    # guesses compete as hypotheses and seed the putative-match pools
    pools = []
    best = None
    for guess in _pre_alignments(src, dst, init):
        for maxd in params.polish_schedule:
            try:
                guess = icp_refine(probe, dst, guess, IcpParams(params.polish_iters, 1e-9, maxd),
                                   tree=tree).transform
            except StallError:
                break
        _, j = tree.query(guess.apply(src))
        pools.append(j)
        count = int(_inliers(tree, guess.apply(probe), thr)[0].sum())
        if best is None or count > best[0]:
            best = (count, guess)
    rng = np.random.default_rng(params.seed)
    fitted = 0
    for it in range(params.iterations):
        match = pools[it % len(pools)]
        idx = rng.choice(src.shape[0], 3, replace=False)
        a, b = src[idx], dst[match[idx]]
        if triangle_area(a) < DEGENERATE_AREA or triangle_area(b) < DEGENERATE_AREA:
            continue
        T = procrustes(a, b)
        fitted += 1
        count = int(_inliers(tree, T.apply(probe), thr)[0].sum())
        if count > best[0]:
            best = (count, T)
    if fitted == 0:
        raise NoSolutionError("every RANSAC sample was degenerate")

    T = best[1]
    prev = None
    for _ in range(params.refit_rounds):
        ok, j, _ = _inliers(tree, T.apply(src), thr)
        if ok.sum() < 3:
            break
        key = (np.flatnonzero(ok), j[ok])
        if prev is not None and np.array_equal(prev[0], key[0]) and np.array_equal(prev[1], key[1]):
            break
        prev = key
        T = procrustes(src[ok], dst[j[ok]])
    ok, j, d = _inliers(tree, T.apply(src), thr)
    rms = math.sqrt(float(np.mean(d[ok] ** 2))) if ok.any() else math.inf
    return RegistrationResult(T, int(ok.sum()), rms, params.iterations, np.flatnonzero(ok))


def icp_refine(source, target, init: RigidTransform | None = None,
               params: IcpParams = IcpParams(), tree: cKDTree | None = None) -> RegistrationResult:
    """Point-to-point ICP.

    Each iteration matches every transformed source point to its nearest
    target point within ``max_correspondence_dist`` and refits by SVD.  A
    refit that would raise the RMS error is rejected and ends the loop, so
    the reported RMS history never increases.

    Raises
    ------
    StallError
        No source point has a target neighbour within range.
    """
    src = as_cloud(source).points
    dst = as_cloud(target).points
    if src.shape[0] == 0 or dst.shape[0] == 0:
        raise InvalidInputError("ICP needs non-empty clouds")
    T = init or RigidTransform.identity()
    tree = tree if tree is not None else cKDTree(dst)
    maxd = params.max_correspondence_dist

    def match(T):
        ok, j, d = _inliers(tree, T.apply(src), maxd)
        if not ok.any():
            raise StallError(f"no correspondences within {maxd} m", T)
        return ok, j, math.sqrt(float(np.mean(d[ok] ** 2)))

    ok, j, rms = match(T)
    history = [rms]
    iters = 0
    while iters < params.max_iters and rms > 0.0:
        T_new = procrustes(src[ok], dst[j[ok]])
        iters += 1
        ok_new, j_new, rms_new = match(T_new)
        if rms_new > rms:
            break
        gain = rms - rms_new
        T, ok, j, rms = T_new, ok_new, j_new, rms_new
        history.append(rms)
        if gain < params.convergence_tol:
            break
    return RegistrationResult(T, int(ok.sum()), rms, iters, np.flatnonzero(ok), tuple(history))


def fuse_views(scans) -> PointCloud:
    """Map every ``(cloud, transform)`` view into the world frame and concatenate."""
    scans = list(scans)
    if not scans:
        raise InvalidInputError("no views to fuse")
    parts = [T.apply(as_cloud(c).points) for c, T in scans]
    return PointCloud(np.vstack(parts), WORLD)


def register(source, target, init: RigidTransform | None = None,
             ransac: RansacParams = RansacParams(),
             icp_schedule=(0.02, 0.005, 0.002)) -> RegistrationResult:
    """RANSAC followed by ICP with shrinking correspondence distances."""
    result = ransac_align(source, target, ransac, init)
    T = result.transform
    for maxd in icp_schedule:
        result = icp_refine(source, target, T, IcpParams(max_correspondence_dist=maxd))
        T = result.transform
    return result


def calibrate(scans, model, inits=None, ransac: RansacParams = RansacParams(),
              icp_schedule=(0.02, 0.005, 0.002)) -> list:
    """Camera-to-world extrinsics from scans of a known calibration object.

    ``scans`` are clouds in their camera frames; ``model`` is the object's
    surface in the world frame; ``inits`` are optional rough extrinsics.
    """
    scans = list(scans)
    if not scans:
        raise InvalidInputError("no scans to calibrate")
    inits = list(inits) if inits is not None else [None] * len(scans)
    if len(inits) != len(scans):
        raise InvalidInputError("need one initial guess per scan")
    out = []
    for i, (scan, init) in enumerate(zip(scans, inits)):
        params = dataclasses.replace(ransac, seed=ransac.seed + i)
        out.append(register(scan, model, init, params, icp_schedule))
    return out


def surface_rms(cloud, reference) -> float:
    """RMS distance from each point of ``cloud`` to its nearest ``reference`` point."""
    d, _ = cKDTree(as_cloud(reference).points).query(as_cloud(cloud).points)
    return math.sqrt(float(np.mean(d * d)))
