"""Analytic grasp dynamics for a parallel gripper squeezing a clay point cloud.

Grasp frame
-----------
For an action with yaw ``rot_z = θ`` the fingers close along
``u = (cos θ, sin θ, 0)`` (the grasp frame's y axis).  The finger faces
span the width axis ``v = (sin θ, -cos θ, 0)`` and the vertical axis.  A
point ``p`` has grasp coordinates

    s = (p - c)·u    (closing)
    w = (p - c)·v    (across the finger face)
    h = p_z - c_z    (vertical)

where ``c`` is the grasp center.  The fingers start with their inner faces at
``s = ±d_max/2`` and stop at ``s = ±d/2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
from scipy.spatial import cKDTree

from .cloud import PointCloud, as_cloud
from .errors import InvalidInputError

TWO_PI = 2.0 * math.pi


def wrap_angle(a: float) -> float:
    """Map an angle to [-π, π)."""
    w = math.fmod(a + math.pi, TWO_PI)
    if w < 0.0:
        w += TWO_PI
    w -= math.pi
    return -math.pi if w >= math.pi else w


@dataclass(frozen=True)
class GripperModel:
    finger_width: float = 0.02
    finger_height: float = 0.03
    finger_thickness: float = 0.01
    d_max: float = 0.08
    d_min: float = 0.006

    def __post_init__(self):
        dims = (self.finger_width, self.finger_height, self.finger_thickness, self.d_max, self.d_min)
        if not all(math.isfinite(v) and v > 0 for v in dims):
            raise InvalidInputError("gripper dimensions must be positive")
        if not self.d_min < self.d_max:
            raise InvalidInputError("d_min must be below d_max")


@dataclass(frozen=True)
class GraspAction:
    """5-DoF grasp: center (x, y, z), yaw about +z, final fingertip separation d."""

    x: float
    y: float
    z: float
    rot_z: float
    d: float

    def __post_init__(self):
        vals = (self.x, self.y, self.z, self.rot_z, self.d)
        if not all(math.isfinite(float(v)) for v in vals):
            raise InvalidInputError(f"non-finite action {vals}")
        for name in ("x", "y", "z", "d"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "rot_z", wrap_angle(float(self.rot_z)))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    @property
    def closing_axis(self) -> np.ndarray:
        return np.array([math.cos(self.rot_z), math.sin(self.rot_z), 0.0])

    @property
    def width_axis(self) -> np.ndarray:
        return np.array([math.sin(self.rot_z), -math.cos(self.rot_z), 0.0])

    def rotated(self, angle: float, pivot=(0.0, 0.0, 0.0)) -> "GraspAction":
        """The same grasp after rotating the world by ``angle`` about z through ``pivot``."""
        c, s = math.cos(angle), math.sin(angle)
        px, py = float(pivot[0]), float(pivot[1])
        dx, dy = self.x - px, self.y - py
        return GraspAction(px + c * dx - s * dy, py + s * dx + c * dy, self.z,
                           self.rot_z + angle, self.d)

    def to_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "z": self.z, "rot_z": self.rot_z, "d": self.d}

    @classmethod
    def from_dict(cls, d: dict) -> "GraspAction":
        try:
            return cls(d["x"], d["y"], d["z"], d["rot_z"], d["d"])
        except KeyError as e:
            raise InvalidInputError(f"action is missing field {e}") from None

    def validate(self, gripper: GripperModel, bounds=None, tol: float = 1e-12):
        if not gripper.d_min - tol <= self.d <= gripper.d_max + tol:
            raise InvalidInputError(
                f"d={self.d} outside [{gripper.d_min}, {gripper.d_max}]")
        if bounds is not None:
            lo, hi = np.asarray(bounds[0]), np.asarray(bounds[1])
            p = self.position
            if np.any(p < lo - tol) or np.any(p > hi + tol):
                raise InvalidInputError(f"action position {p} outside workspace")


def noop_action(gripper: GripperModel, position=(0.0, 0.0, 0.0)) -> GraspAction:
    """A grasp that never closes (d = d_max); leaves every cloud unchanged."""
    return GraspAction(position[0], position[1], position[2], 0.0, gripper.d_max)


@dataclass(frozen=True)
class Constraints:
    """Distance-constraint parameters for material redistribution.

    ``max_stretch`` defaults to ``stretch_factor`` times the median
    nearest-neighbour spacing of the input cloud.  Pushes travel along
    k-nearest-neighbour links no longer than ``hop_factor * max_stretch``.
    """

    max_stretch: float | None = None
    stretch_factor: float = 1.2
    k_neighbors: int = 8
    max_iters: int = 50
    hop_factor: float = 1.0

    def __post_init__(self):
        if self.max_stretch is not None and not self.max_stretch > 0:
            raise InvalidInputError("max_stretch must be positive")
        if self.k_neighbors < 1 or self.max_iters < 0 or self.hop_factor <= 0:
            raise InvalidInputError("invalid constraint parameters")


DEFAULT_GRIPPER = GripperModel()
DEFAULT_CONSTRAINTS = Constraints()


@dataclass(frozen=True, eq=False)
class OrientedBox:
    center: np.ndarray
    axes: np.ndarray  # rows: closing, width, vertical
    half_extents: np.ndarray

    def local(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.center) @ self.axes.T

    def contains(self, points, strict: bool = False, tol: float = 0.0) -> np.ndarray:
        """Closed containment, or open containment shrunk by ``tol`` when ``strict``."""
        q = np.abs(self.local(points))
        if strict:
            return np.all(q < self.half_extents - tol, axis=-1)
        return np.all(q <= self.half_extents + tol, axis=-1)

    @property
    def depth(self) -> float:
        return 2.0 * float(self.half_extents[0])


@dataclass(frozen=True, eq=False)
class SweptRegion:
    boxes: tuple
    closing_axis: np.ndarray
    center: np.ndarray

    def contains(self, points, strict: bool = False, tol: float = 0.0) -> np.ndarray:
        return self.boxes[0].contains(points, strict, tol) | self.boxes[1].contains(points, strict, tol)


def _grasp_axes(action: GraspAction) -> np.ndarray:
    return np.stack([action.closing_axis, action.width_axis, np.array([0.0, 0.0, 1.0])])


def swept_region(action: GraspAction, gripper: GripperModel = DEFAULT_GRIPPER) -> SweptRegion:
    """The two boxes traversed by the inner finger faces while closing."""
    action.validate(gripper)
    axes = _grasp_axes(action)
    c = action.position
    lo, hi = action.d / 2.0, gripper.d_max / 2.0
    mid = (lo + hi) / 2.0
    half = np.array([(hi - lo) / 2.0, gripper.finger_width / 2.0, gripper.finger_height / 2.0])
    boxes = tuple(OrientedBox(c + sign * mid * axes[0], axes, half) for sign in (1.0, -1.0))
    return SweptRegion(boxes, axes[0], c)


def grasp_coordinates(points: np.ndarray, action: GraspAction) -> np.ndarray:
    """``(N, 3)`` array of (s, w, h) grasp-frame coordinates."""
    return (points - action.position) @ _grasp_axes(action).T


def _project(pts: np.ndarray, action: GraspAction, gripper: GripperModel):
    """Move swept points onto the final finger faces.

    Returns the projected copy, the inlier mask and per-point displacement.
    """
    sw_h = grasp_coordinates(pts, action)
    s, w, h = sw_h[:, 0], sw_h[:, 1], sw_h[:, 2]
    lo, hi = action.d / 2.0, gripper.d_max / 2.0
    foot = (np.abs(w) <= gripper.finger_width / 2.0) & (np.abs(h) <= gripper.finger_height / 2.0)
    pos = foot & (s >= lo) & (s <= hi)
    neg = foot & (s <= -lo) & (s >= -hi)
    move = np.zeros(pts.shape[0])
    move[pos] = s[pos] - lo
    move[neg] = -s[neg] - lo
    out = pts.copy()
    u = action.closing_axis
    if pos.any():
        out[pos] -= move[pos, None] * u
    if neg.any():
        out[neg] += move[neg, None] * u
    return out, pos | neg, move, sw_h


def redistribution_radius(action: GraspAction, gripper: GripperModel = DEFAULT_GRIPPER,
                          constraints: Constraints = DEFAULT_CONSTRAINTS) -> float:
    """Upper bound on how far from the swept boxes redistribution can reach."""
    return constraints.hop_factor * max(0.0, (gripper.d_max - action.d) / 2.0)


@dataclass(frozen=True, eq=False)
class NeighborGraph:
    """k-nearest-neighbour links of one cloud, cut at ``hop_factor * max_stretch``.

    ``neighbors[i]`` lists up to ``k`` other points nearest-first; missing
    slots hold ``n`` (one past the last index).
    """

    max_stretch: float
    neighbors: np.ndarray


def neighbor_graph(cloud, constraints: Constraints = DEFAULT_CONSTRAINTS) -> NeighborGraph:
    pts = as_cloud(cloud).points
    n = pts.shape[0]
    k = constraints.k_neighbors
    if n < 2:
        ms = constraints.max_stretch or 0.0
        return NeighborGraph(ms, np.full((n, k), n, dtype=np.int64))
    kk = min(k + 1, n)
    dist, nb = cKDTree(pts).query(pts, k=kk)
    ms = constraints.max_stretch
    if ms is None:
        ms = constraints.stretch_factor * float(np.median(dist[:, 1]))
    rows = np.arange(n)[:, None]
    # drop self (not always column 0 when points are duplicated) and long links
    keep = (nb != rows) & (dist <= constraints.hop_factor * ms)
    order = np.argsort(~keep, axis=1, kind="stable")
    nb = np.where(np.take_along_axis(keep, order, 1), np.take_along_axis(nb, order, 1), n)
    out = np.full((n, k), n, dtype=np.int64)
    out[:, : min(k, kk)] = nb[:, : min(k, kk)]
    return NeighborGraph(ms, out)


def _redistribute(out, inlier, move, sw_h, action, constraints, graph: NeighborGraph):
    ms = graph.max_stretch
    seeds = np.flatnonzero(inlier & (move > ms))
    if seeds.size == 0 or ms <= 0:
        return
    n = out.shape[0]
    # sentinel slot n absorbs pushes along missing links
    blocked = np.append(inlier, True)
    level = np.zeros(n + 1)
    nb = graph.neighbors[seeds]
    push = np.broadcast_to((move[seeds] - ms)[:, None], nb.shape)
    ok = ~blocked[nb]
    np.maximum.at(level, nb[ok], push[ok])
    level[n] = 0.0
    for _ in range(constraints.max_iters):
        active = np.flatnonzero(level[:n] > ms)
        if active.size == 0:
            break
        nb = graph.neighbors[active]
        ok = ~blocked[nb]
        cand = np.broadcast_to((level[active] - ms)[:, None], nb.shape)[ok]
        dst = nb[ok]
        if not np.any(cand > level[dst]):
            break
        np.maximum.at(level, dst, cand)
        level[n] = 0.0

    idx = np.flatnonzero(level[:n] > 0.0)
    if idx.size == 0:
        return
    w, h = sw_h[idx, 1], sw_h[idx, 2]
    r = np.hypot(w, h)
    safe = np.where(r > 0, r, 1.0)
    tw = np.where(r > 0, w / safe, 0.0)
    th = np.where(r > 0, h / safe, 1.0)
    direction = tw[:, None] * action.width_axis + th[:, None] * np.array([0.0, 0.0, 1.0])
    out[idx] += level[idx, None] * direction


def apply_grasp(cloud, action: GraspAction, gripper: GripperModel = DEFAULT_GRIPPER,
                constraints: Constraints = DEFAULT_CONSTRAINTS,
                graph: NeighborGraph | None = None) -> PointCloud:
    """Predict the clay after one grasp.

    Points inside either swept box are pushed along the closing axis onto
    the final inner face of their finger.  A pushed point whose travel
    exceeds ``max_stretch`` hands the excess to its free (non-swept)
    neighbours.  They are displaced outward in the finger-face plane.  The
    push decays by ``max_stretch`` per neighbour link and spreads until no
    linked pair differs by more than that.

    ``graph`` is the cloud's :func:`neighbor_graph`; pass it to reuse one
    graph across many actions on the same cloud.
    """
    c = as_cloud(cloud)
    if len(c) == 0:
        raise InvalidInputError("cloud is empty")
    action.validate(gripper)
    if action.d >= gripper.d_max:
        return c
    out, inlier, move, sw_h = _project(c.points, action, gripper)
    if not inlier.any():
        return c
    if not np.any(move > 0.0):
        return c
    if graph is None:
        graph = neighbor_graph(c, constraints)
    _redistribute(out, inlier, move, sw_h, action, constraints, graph)
    return c.with_points(out)


def propagate_centroids(centroids, action: GraspAction,
                        gripper: GripperModel = DEFAULT_GRIPPER) -> np.ndarray:
    """Projection-only update of a sparse centroid cloud."""
    pts = np.asarray(centroids.points if isinstance(centroids, PointCloud) else centroids,
                     dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise InvalidInputError("no centroids")
    action.validate(gripper)
    if action.d >= gripper.d_max:
        return pts.copy()
    return _project(pts, action, gripper)[0]


class Dynamics(Protocol):
    def predict(self, cloud: PointCloud, action: GraspAction) -> PointCloud: ...


@dataclass
class AnalyticDynamics:
    """Default dynamics model wrapping :func:`apply_grasp`.

    Keeps the neighbour graph of the most recent cloud so that scoring many
    candidates on one state builds it once.
    """

    gripper: GripperModel = DEFAULT_GRIPPER
    constraints: Constraints = DEFAULT_CONSTRAINTS
    _last: tuple = field(default=(None, None), repr=False, compare=False)

    def graph_for(self, cloud: PointCloud) -> NeighborGraph:
        last_cloud, graph = self._last
        if last_cloud is not cloud:
            graph = neighbor_graph(cloud, self.constraints)
            self._last = (cloud, graph)
        return graph

    def predict(self, cloud: PointCloud, action: GraspAction) -> PointCloud:
        cloud = as_cloud(cloud)
        return apply_grasp(cloud, action, self.gripper, self.constraints, self.graph_for(cloud))
