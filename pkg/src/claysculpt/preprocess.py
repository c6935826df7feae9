"""Scan cleanup: crop to the stage, keep the clay, drop fliers, close the base, resample."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull, QhullError, cKDTree

from .cloud import PointCloud, as_cloud, downsample_random
from .errors import EmptyClayError, InvalidInputError, NoBaseError, PipelineError

LABELS = ("clay", "table", "stage", "other")
STAGE_Z = 0.0
DEFAULT_BOUNDS = ((-0.1, -0.1, STAGE_Z), (0.1, 0.1, 0.1))


@dataclass(frozen=True, eq=False)
class RawScan:
    """Scanned points with a per-point class label standing in for color segmentation."""

    points: np.ndarray
    labels: np.ndarray
    frame: str = "world"

    def __post_init__(self):
        pts = PointCloud(self.points).points
        labels = np.asarray(self.labels, dtype=object).reshape(-1)
        if labels.shape[0] != pts.shape[0]:
            raise InvalidInputError("labels and points differ in length")
        unknown = set(labels.tolist()) - set(LABELS)
        if unknown:
            raise InvalidInputError(f"unknown labels {sorted(unknown)}")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.points.shape[0]

    def subset(self, mask) -> "RawScan":
        return RawScan(self.points[mask], self.labels[mask], self.frame)

    @classmethod
    def all_clay(cls, cloud) -> "RawScan":
        c = as_cloud(cloud)
        return cls(c.points, np.full(len(c), "clay", dtype=object), c.frame)


@dataclass(frozen=True, eq=False)
class ClayShell:
    cloud: PointCloud
    base_z: float


def check_bounds(bounds):
    lo = np.asarray(bounds[0], dtype=np.float64).reshape(3)
    hi = np.asarray(bounds[1], dtype=np.float64).reshape(3)
    if not np.all(lo < hi):
        raise InvalidInputError(f"invalid box {lo} .. {hi}")
    return lo, hi


def crop_workspace(scan: RawScan, bounds) -> RawScan:
    """Keep the points inside the closed axis-aligned box."""
    lo, hi = check_bounds(bounds)
    inside = np.all((scan.points >= lo) & (scan.points <= hi), axis=1)
    return scan.subset(inside)


def isolate_clay(scan: RawScan) -> PointCloud:
    mask = scan.labels == "clay"
    if not mask.any():
        raise EmptyClayError("scan has no clay points")
    return PointCloud(scan.points[mask], scan.frame)


def mean_neighbor_distance(cloud, k: int) -> np.ndarray:
    """Mean distance from each point to its ``k`` nearest other points."""
    pts = as_cloud(cloud).points
    d, _ = cKDTree(pts).query(pts, k=k + 1)
    return d[:, 1:].mean(axis=1)


def remove_outliers(cloud, k_neighbors: int = 20, std_ratio: float = 2.0) -> PointCloud:
    """Statistical outlier filter.

    Drops points whose mean distance to their ``k_neighbors`` nearest
    neighbours exceeds the global mean of that statistic by more than
    ``std_ratio`` standard deviations.
    """
    c = as_cloud(cloud)
    if k_neighbors < 1 or len(c) <= k_neighbors:
        raise InvalidInputError(f"need more than k_neighbors={k_neighbors} points, got {len(c)}")
    mean_d = mean_neighbor_distance(c, k_neighbors)
    limit = mean_d.mean() + std_ratio * mean_d.std()
    return c.with_points(c.points[mean_d <= limit])


def _base_outline(cloud: PointCloud, base_band: float):
    pts = cloud.points
    if pts.shape[0] == 0:
        raise InvalidInputError("cloud is empty")
    min_z = float(pts[:, 2].min())
    band = pts[pts[:, 2] < min_z + base_band]
    if band.shape[0] < 3:
        raise NoBaseError(f"only {band.shape[0]} points within {base_band} m of the bottom")
    try:
        hull = ConvexHull(band[:, :2])
    except QhullError as e:
        raise NoBaseError(f"base points are degenerate: {e.args[0].splitlines()[0]}") from None
    return min_z, band, hull


def _hull_grid(hull: ConvexHull, grid_step: float) -> np.ndarray:
    if not grid_step > 0:
        raise InvalidInputError("grid_step must be positive")
    lo = hull.min_bound
    hi = hull.max_bound
    xs = lo[0] + grid_step * np.arange(int(np.floor((hi[0] - lo[0]) / grid_step)) + 1)
    ys = lo[1] + grid_step * np.arange(int(np.floor((hi[1] - lo[1]) / grid_step)) + 1)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    grid = np.column_stack([gx.ravel(), gy.ravel()])
    inside = np.all(grid @ hull.equations[:, :2].T + hull.equations[:, 2] <= 1e-12, axis=1)
    return grid[inside]


def complete_base(cloud, base_band: float = 0.003, grid_step: float = 0.002,
                  base_z: float | None = None) -> PointCloud:
    """Close the bottom of a cloud with a flat grid of points.

    The x-y convex hull of the points within ``base_band`` of the lowest
    point is filled with a ``grid_step`` lattice at ``base_z`` (default: the
    lowest z).
    """
    c = as_cloud(cloud)
    min_z, _, hull = _base_outline(c, base_band)
    if base_z is None:
        base_z = min_z
    elif base_z > min_z + 1e-12:
        raise InvalidInputError(f"base_z {base_z} lies above the lowest point {min_z}")
    grid = _hull_grid(hull, grid_step)
    base = np.column_stack([grid, np.full(grid.shape[0], base_z)])
    return c.with_points(np.vstack([c.points, base]))


def base_coverage(cloud, base_band: float, grid_step: float, radius: float) -> float:
    """Fraction of the base-outline lattice already within ``radius`` of a base-band point."""
    c = as_cloud(cloud)
    _, band, hull = _base_outline(c, base_band)
    grid = _hull_grid(hull, grid_step)
    if grid.shape[0] == 0:
        return 1.0
    d, _ = cKDTree(band[:, :2]).query(grid, k=1)
    return float(np.mean(d <= radius))


@dataclass(frozen=True)
class PreprocessConfig:
    bounds: tuple = DEFAULT_BOUNDS
    n: int = 2048
    base_band: float = 0.003
    grid_step: float = 0.002
    k_neighbors: int = 20
    std_ratio: float = 2.0
    seed: int = 0
    stage_z: float = STAGE_Z
    # An existing base counts as closed when this fraction of the outline
    # lattice has a base point within 2.5 grid steps.
    base_coverage: float = 0.95


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (InvalidInputError, PipelineError) as e:
        raise PipelineError(name, e) from e


def _downsample_keep_lowest(cloud: PointCloud, n: int, seed: int) -> PointCloud:
    out = downsample_random(cloud, n, seed)
    lowest = cloud.points[np.argmin(cloud.points[:, 2])]
    if n and out.points[:, 2].min() > lowest[2]:
        pts = out.points.copy()
        pts[-1] = lowest
        out = out.with_points(pts)
    return out


def preprocess_pipeline(scan: RawScan, config: PreprocessConfig = PreprocessConfig()) -> ClayShell:
    """Crop, isolate clay, remove outliers, close the base and resample to ``config.n`` points.

    The crop floor is raised to the stage height so the shell never dips
    below the stage; the base plane is laid at ``config.stage_z``.
    """
    lo, hi = _stage("crop", check_bounds, config.bounds)
    lo = lo.copy()
    lo[2] = max(lo[2], config.stage_z)
    cropped = _stage("crop", crop_workspace, scan, (lo, hi))
    clay = _stage("isolate", isolate_clay, cropped)
    clean = _stage("outliers", remove_outliers, clay, config.k_neighbors, config.std_ratio)
    covered = _stage("base", base_coverage, clean, config.base_band, config.grid_step,
                     2.5 * config.grid_step)
    base_z = float(clean.points[:, 2].min())
    if covered < config.base_coverage:
        clean = _stage("base", complete_base, clean, config.base_band, config.grid_step,
                       base_z=config.stage_z)
        base_z = config.stage_z
    shell = _stage("downsample", _downsample_keep_lowest, clean, config.n, config.seed)
    return ClayShell(shell, base_z)
