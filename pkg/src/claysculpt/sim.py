"""Desk-scale stand-in for the robot cell.

Procedural clay and target shapes, a stepping environment built on the
analytic dynamics, and a crude multi-camera scanner.  All target shapes
rest on the stage (z = 0), are centred on the origin and hold roughly the
volume of the initial clay cylinder.

Target library (meters):

========  ==========================================================
cylinder  diameter 0.06, height 0.025 (the initial clay)
line      box 0.11025 x 0.0245 x 0.025 (x/y aspect 4.5)
X         two crossed bars 0.08 x 0.02 x 0.025
T         bar 0.07 x 0.02 on a 0.02 x 0.075 stem, height 0.025
square    box 0.053 x 0.053 x 0.025
triangle  equilateral prism, side 0.0808, height 0.025
cone      base radius 0.04, height 0.042
pyramid   square base 0.07, height 0.0433
========  ==========================================================
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .cloud import PointCloud, RigidTransform, as_cloud, downsample_random
from .dynamics import DEFAULT_CONSTRAINTS, DEFAULT_GRIPPER, AnalyticDynamics, GraspAction
from .errors import InvalidInputError
from .preprocess import STAGE_Z, RawScan, complete_base

CLAY_RADIUS = 0.03
CLAY_HEIGHT = 0.025
CLAY_VOLUME = math.pi * CLAY_RADIUS**2 * CLAY_HEIGHT

BENCHMARK_TARGETS = ("X", "T", "square", "line", "cylinder", "triangle")
TARGET_NAMES = BENCHMARK_TARGETS + ("cone", "pyramid")


# ---------------------------------------------------------------------------
# surface samplers


def _disk(rng, n, radius, z):
    r = radius * np.sqrt(rng.uniform(0.0, 1.0, n))
    t = rng.uniform(0.0, 2.0 * math.pi, n)
    return np.column_stack([r * np.cos(t), r * np.sin(t), np.full(n, z)])


def sample_cylinder(n: int, radius: float, height: float, seed=0, z0: float = STAGE_Z) -> np.ndarray:
    """Area-uniform samples on the closed surface of an upright cylinder."""
    rng = np.random.default_rng(seed)
    areas = np.array([2 * math.pi * radius * height, math.pi * radius**2, math.pi * radius**2])
    n_side, n_top, n_bot = rng.multinomial(n, areas / areas.sum())
    t = rng.uniform(0.0, 2.0 * math.pi, n_side)
    side = np.column_stack([radius * np.cos(t), radius * np.sin(t),
                            z0 + rng.uniform(0.0, height, n_side)])
    pts = np.vstack([side, _disk(rng, n_top, radius, z0 + height), _disk(rng, n_bot, radius, z0)])
    return pts[rng.permutation(n)]


def _box_mesh(lo, hi):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    v = np.array([[hi[0] if i & 1 else lo[0], hi[1] if i & 2 else lo[1], hi[2] if i & 4 else lo[2]]
                  for i in range(8)])
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    faces = [f for a, b, c, d in quads for f in ((a, b, c), (a, c, d))]
    return v, np.array(faces)


def _sample_triangles(rng, vertices, faces, n):
    tri = vertices[faces]
    area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    pick = rng.choice(len(faces), size=n, p=area / area.sum())
    r1 = np.sqrt(rng.uniform(0.0, 1.0, n))
    r2 = rng.uniform(0.0, 1.0, n)
    t = tri[pick]
    return ((1 - r1)[:, None] * t[:, 0] + (r1 * (1 - r2))[:, None] * t[:, 1]
            + (r1 * r2)[:, None] * t[:, 2])


def sample_mesh(vertices, faces, n: int, seed=0) -> np.ndarray:
    """Area-uniform samples on a triangle mesh."""
    return _sample_triangles(np.random.default_rng(seed), np.asarray(vertices, float),
                             np.asarray(faces), n)


def sample_box_union(boxes, n: int, seed=0) -> np.ndarray:
    """Samples on the outer surface of a union of axis-aligned boxes.

    A sample from box ``k`` is rejected if it lies strictly inside another
    box, or anywhere in the closed box ``j < k`` (so coplanar overlaps are
    covered once).
    """
    rng = np.random.default_rng(seed)
    boxes = [(np.asarray(lo, float), np.asarray(hi, float)) for lo, hi in boxes]
    meshes = [_box_mesh(lo, hi) for lo, hi in boxes]
    verts = np.vstack([m[0] for m in meshes])
    faces = np.vstack([m[1] + 8 * i for i, m in enumerate(meshes)])
    owner = np.repeat(np.arange(len(boxes)), 12)
    tri = verts[faces]
    area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    out = []
    got = 0
    while got < n:
        m = 2 * (n - got) + 64
        pick = rng.choice(len(faces), size=m, p=area / area.sum())
        r1 = np.sqrt(rng.uniform(0.0, 1.0, m))
        r2 = rng.uniform(0.0, 1.0, m)
        t = tri[pick]
        p = ((1 - r1)[:, None] * t[:, 0] + (r1 * (1 - r2))[:, None] * t[:, 1]
             + (r1 * r2)[:, None] * t[:, 2])
        keep = np.ones(m, dtype=bool)
        for j, (lo, hi) in enumerate(boxes):
            strict = np.all((p > lo) & (p < hi), axis=1) & (owner[pick] != j)
            closed = np.all((p >= lo) & (p <= hi), axis=1) & (owner[pick] > j)
            keep &= ~(strict | closed)
        out.append(p[keep])
        got += int(keep.sum())
    return np.vstack(out)[:n]


def _prism_mesh(polygon, height, z0=STAGE_Z):
    poly = np.asarray(polygon, float)
    k = len(poly)
    bot = np.column_stack([poly, np.full(k, z0)])
    top = np.column_stack([poly, np.full(k, z0 + height)])
    v = np.vstack([bot, top])
    faces = [(0, i + 1, i) for i in range(1, k - 1)]
    faces += [(k, k + i, k + i + 1) for i in range(1, k - 1)]
    for i in range(k):
        j = (i + 1) % k
        faces += [(i, j, k + j), (i, k + j, k + i)]
    return v, np.array(faces)


def _cone_mesh(radius, height, segments=256, z0=STAGE_Z):
    t = 2 * math.pi * np.arange(segments) / segments
    ring = np.column_stack([radius * np.cos(t), radius * np.sin(t), np.full(segments, z0)])
    v = np.vstack([ring, [[0, 0, z0]], [[0, 0, z0 + height]]])
    c, apex = segments, segments + 1
    faces = []
    for i in range(segments):
        j = (i + 1) % segments
        faces += [(c, j, i), (i, j, apex)]
    return v, np.array(faces)


def _pyramid_mesh(side, height, z0=STAGE_Z):
    h = side / 2
    v = np.array([[-h, -h, z0], [h, -h, z0], [h, h, z0], [-h, h, z0], [0, 0, z0 + height]])
    faces = [(0, 2, 1), (0, 3, 2), (0, 1, 4), (1, 2, 4), (2, 3, 4), (3, 0, 4)]
    return v, np.array(faces)


@dataclass(frozen=True, eq=False)
class TargetShape:
    name: str
    parameters: dict
    cloud: PointCloud
    volume: float


def _target_spec(name):
    h = CLAY_HEIGHT
    if name == "cylinder":
        return {"radius": CLAY_RADIUS, "height": h}, CLAY_VOLUME
    if name == "line":
        w = 0.0245
        L = 4.5 * w
        return {"boxes": [((-L / 2, -w / 2, 0), (L / 2, w / 2, h))]}, L * w * h
    if name == "X":
        L, w = 0.08, 0.02
        return ({"boxes": [((-L / 2, -w / 2, 0), (L / 2, w / 2, h)),
                           ((-w / 2, -L / 2, 0), (w / 2, L / 2, h))]},
                (2 * L * w - w * w) * h)
    if name == "T":
        return ({"boxes": [((-0.035, 0.025, 0), (0.035, 0.045, h)),
                           ((-0.01, -0.045, 0), (0.01, 0.03, h))]},
                (0.07 * 0.02 + 0.02 * 0.07) * h)
    if name == "square":
        a = 0.053
        return {"boxes": [((-a / 2, -a / 2, 0), (a / 2, a / 2, h))]}, a * a * h
    if name == "triangle":
        s = 0.0808
        r = s / math.sqrt(3)
        ang = math.pi / 2 + 2 * math.pi * np.arange(3) / 3
        poly = np.column_stack([r * np.cos(ang), r * np.sin(ang)])
        return {"polygon": poly.tolist(), "height": h}, math.sqrt(3) / 4 * s * s * h
    if name == "cone":
        R, H = 0.04, 0.042
        return {"radius": R, "height": H}, math.pi * R * R * H / 3
    if name == "pyramid":
        a, H = 0.07, 0.0433
        return {"side": a, "height": H}, a * a * H / 3
    raise InvalidInputError(f"unknown target shape {name!r}; choose from {TARGET_NAMES}")


def make_target(shape: str, n: int = 2048, seed=0) -> TargetShape:
    """Sample ``n`` points on the closed surface of a named target shape."""
    params, volume = _target_spec(shape)
    if n < 1:
        raise InvalidInputError("n must be positive")
    if shape == "cylinder":
        pts = sample_cylinder(n, params["radius"], params["height"], seed)
    elif "boxes" in params:
        pts = sample_box_union(params["boxes"], n, seed)
    elif shape == "triangle":
        pts = sample_mesh(*_prism_mesh(params["polygon"], params["height"]), n, seed)
    elif shape == "cone":
        pts = sample_mesh(*_cone_mesh(params["radius"], params["height"]), n, seed)
    else:
        pts = sample_mesh(*_pyramid_mesh(params["side"], params["height"]), n, seed)
    return TargetShape(shape, params, PointCloud(pts), volume)


def make_initial_clay(n: int = 2048, seed=0) -> PointCloud:
    """The starting clay: a closed cylinder 6 cm across and 2.5 cm tall on the stage."""
    if n < 100:
        raise InvalidInputError("initial clay needs at least 100 points")
    return PointCloud(sample_cylinder(n, CLAY_RADIUS, CLAY_HEIGHT, seed))


CALIBRATION_BOXES = (
    ((-0.05, -0.03, 0.0), (0.04, 0.03, 0.02)),
    ((0.01, -0.03, 0.02), (0.04, 0.01, 0.07)),
    ((-0.05, 0.0, 0.02), (-0.02, 0.03, 0.04)),
)


def make_calibration_object(n: int = 4096, seed=0) -> PointCloud:
    """Asymmetric stepped block used to recover camera extrinsics.

    No proper rotation maps it onto itself, so its pose is unambiguous.
    """
    return PointCloud(sample_box_union(CALIBRATION_BOXES, n, seed))


# ---------------------------------------------------------------------------
# environment


@dataclass(frozen=True)
class EnvConfig:
    noise_sigma: float = 0.0
    reshell: bool = False
    seed: int = 0
    base_band: float = 0.003
    grid_step: float = 0.002

    def __post_init__(self):
        if not self.noise_sigma >= 0:
            raise InvalidInputError("noise_sigma must be non-negative")


def env_step(cloud, action: GraspAction, cfg: EnvConfig = EnvConfig(), dynamics=None,
             rng: np.random.Generator | None = None) -> PointCloud:
    """Execute one grasp: dynamics, then Gaussian jitter, then optional re-shelling.

    Re-shelling stands in for a fresh scan: points pushed through the stage
    are lifted back onto it, the base is closed and the cloud is resampled
    to its original size.
    """
    dynamics = dynamics or AnalyticDynamics()
    out = dynamics.predict(as_cloud(cloud), action)
    if cfg.noise_sigma == 0 and not cfg.reshell:
        return out
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    pts = out.points
    if cfg.noise_sigma > 0:
        pts = pts + rng.normal(0.0, cfg.noise_sigma, pts.shape)
    if cfg.reshell:
        n = pts.shape[0]
        pts = pts.copy()
        pts[:, 2] = np.maximum(pts[:, 2], STAGE_Z)
        closed = complete_base(out.with_points(pts), cfg.base_band, cfg.grid_step)
        pts = downsample_random(closed, n, int(rng.integers(2**63))).points
    return out.with_points(pts)


class SimEnvironment:
    """Stateful wrapper: each call to :meth:`step` draws fresh, seed-derived noise."""

    def __init__(self, cfg: EnvConfig = EnvConfig(), dynamics=None):
        self.cfg = cfg
        self.dynamics = dynamics or AnalyticDynamics(DEFAULT_GRIPPER, DEFAULT_CONSTRAINTS)
        self.calls = 0

    def step(self, cloud, action: GraspAction) -> PointCloud:
        rng = np.random.default_rng([self.cfg.seed, self.calls])
        self.calls += 1
        return env_step(cloud, action, self.cfg, self.dynamics, rng)


# ---------------------------------------------------------------------------
# synthetic scanner


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> RigidTransform:
    """Camera-to-world pose of a camera at ``eye`` looking at ``target``.

    Camera axes follow the usual vision convention: z forward, x right,
    y down.
    """
    eye = np.asarray(eye, float)
    fwd = np.asarray(target, float) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, float))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, [1.0, 0.0, 0.0])
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return RigidTransform(np.column_stack([right, down, fwd]), eye)


def ring_cameras(n: int = 4, radius: float = 0.4, height: float = 0.3,
                 target=(0.0, 0.0, 0.0125), phase: float = math.pi / 4) -> list:
    """``n`` cameras evenly spaced on a horizontal circle, all aimed at ``target``."""
    cams = []
    for i in range(n):
        a = phase + 2 * math.pi * i / n
        eye = (radius * math.cos(a), radius * math.sin(a), height)
        cams.append(look_at(eye, target))
    return cams


def visible_mask(points: np.ndarray, camera: RigidTransform, center=None) -> np.ndarray:
    """Hemisphere visibility: outward radial direction must face the camera."""
    center = points.mean(axis=0) if center is None else np.asarray(center, float)
    return (points - center) @ (camera.translation - center) > 0.0


def _scene_extras(rng, center, footprint, n_stage, n_table):
    r = np.sqrt(rng.uniform((footprint / 0.06) ** 2, 1.0, n_stage)) * 0.06
    t = rng.uniform(0.0, 2 * math.pi, n_stage)
    stage = np.column_stack([center[0] + r * np.cos(t), center[1] + r * np.sin(t),
                             np.full(n_stage, STAGE_Z)])
    table = rng.uniform([-0.25, -0.25], [0.25, 0.25], (n_table * 2, 2))
    table = table[np.hypot(table[:, 0] - center[0], table[:, 1] - center[1]) > 0.07][:n_table]
    table = np.column_stack([table, np.full(table.shape[0], STAGE_Z - 0.08)])
    return stage, table


def synth_scan(obj, cameras, sensor_noise: float = 0.0, seed=0, cull: bool = True,
               scene: bool = False, n_stage: int = 600, n_table: int = 1200) -> list:
    """One labelled scan per camera, each expressed in that camera's frame.

    ``cameras`` are camera-to-world poses.  With ``scene`` the stage top and
    the table are added and labelled.  Stage and table points face up, so
    they are visible to cameras above them.
    """
    if len(cameras) == 0:
        raise InvalidInputError("need at least one camera")
    if sensor_noise < 0:
        raise InvalidInputError("sensor_noise must be non-negative")
    pts = as_cloud(obj).points
    rng = np.random.default_rng(seed)
    center = pts.mean(axis=0)
    extras = []
    if scene:
        footprint = float(np.max(np.hypot(pts[:, 0] - center[0], pts[:, 1] - center[1])))
        stage, table = _scene_extras(rng, center, min(footprint, 0.059), n_stage, n_table)
        extras = [(stage, "stage"), (table, "table")]
    scans = []
    for i, cam in enumerate(cameras):
        keep = visible_mask(pts, cam, center) if cull else np.ones(len(pts), dtype=bool)
        chunks = [pts[keep]]
        labels = [np.full(int(keep.sum()), "clay", dtype=object)]
        for extra, label in extras:
            up = extra[:, 2] < cam.translation[2]
            chunks.append(extra[up])
            labels.append(np.full(int(up.sum()), label, dtype=object))
        world = np.vstack(chunks)
        local = cam.inverse().apply(world)
        if sensor_noise > 0:
            local = local + rng.normal(0.0, sensor_noise, local.shape)
        scans.append(RawScan(local, np.concatenate(labels), frame=f"camera{i}"))
    return scans


def make_scene(clay, seed=0, table_fraction: float = 0.3, n_fliers: int = 5,
               n_stage: int = 400, flier_offset: tuple = (0.006, 0.012)):
    """World-frame labelled scene: clay plus stage, table and clay-labelled fliers.

    Fliers sit ``flier_offset`` meters outward (and slightly up) from random
    clay points, and at least ``flier_offset[0]`` from every clay point.  Returns ``(scan, flier_points)``.
    """
    rng = np.random.default_rng(seed)
    pts = as_cloud(clay).points
    center = pts.mean(axis=0)
    footprint = float(np.max(np.hypot(pts[:, 0] - center[0], pts[:, 1] - center[1])))
    n_table = int(round(table_fraction / (1 - table_fraction) * (len(pts) + n_stage + n_fliers)))
    stage, table = _scene_extras(rng, center, min(footprint, 0.059), n_stage, n_table)
    tree = cKDTree(pts)
    fliers = np.empty((0, 3))
    while len(fliers) < n_fliers:
        # a flier pushed off a bottom-face point can land next to the wall,
        # so keep only candidates at least the minimum offset from the clay
        base = pts[rng.choice(len(pts), n_fliers, replace=False)]
        radial = base - center
        radial[:, 2] = 0.0
        norm = np.linalg.norm(radial, axis=1, keepdims=True)
        radial = np.where(norm > 0, radial / np.where(norm > 0, norm, 1.0), [1.0, 0.0, 0.0])
        direction = radial + np.array([0.0, 0.0, 0.5])
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        cand = base + rng.uniform(*flier_offset, (n_fliers, 1)) * direction
        ok = tree.query(cand)[0] >= flier_offset[0]
        fliers = np.vstack([fliers, cand[ok]])[:n_fliers]
    points = np.vstack([pts, fliers, stage, table])
    labels = np.concatenate([np.full(len(pts) + n_fliers, "clay", dtype=object),
                             np.full(len(stage), "stage", dtype=object),
                             np.full(len(table), "table", dtype=object)])
    order = rng.permutation(len(points))
    return RawScan(points[order], labels[order]), fliers
