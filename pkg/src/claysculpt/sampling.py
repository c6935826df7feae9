"""Candidate grasp generators: the cluster-pairing geometric sampler and random shooting."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cloud import kmeans
from .dynamics import DEFAULT_GRIPPER, GraspAction, GripperModel
from .errors import InvalidInputError

DEFAULT_ACTION_BOUNDS = ((-0.06, -0.06, 0.0), (0.06, 0.06, 0.03))


@dataclass(frozen=True)
class SamplerConfig:
    n_clusters: int = 10
    n_samples: int = 35
    bounds: tuple = DEFAULT_ACTION_BOUNDS
    seed: int = 0
    gripper: GripperModel = DEFAULT_GRIPPER
    kmeans_iters: int = 100
    kmeans_tol: float = 1e-9
    # total pair separation (m) at or below which state and target count as equal
    degenerate_tol: float = 1e-9

    def __post_init__(self):
        if self.n_clusters < 1 or self.n_samples < 0:
            raise InvalidInputError("n_clusters must be >= 1 and n_samples >= 0")
        lo, hi = np.asarray(self.bounds[0], float), np.asarray(self.bounds[1], float)
        if lo.shape != (3,) or hi.shape != (3,) or not np.all(lo < hi):
            raise InvalidInputError(f"invalid action bounds {self.bounds}")

    def with_seed(self, seed: int) -> "SamplerConfig":
        return SamplerConfig(self.n_clusters, self.n_samples, self.bounds, seed, self.gripper,
                             self.kmeans_iters, self.kmeans_tol, self.degenerate_tol)


@dataclass(frozen=True, eq=False)
class PairedClusters:
    """Row ``i`` of ``state`` is matched with row ``i`` of ``target``."""

    state: np.ndarray
    target: np.ndarray
    dists: np.ndarray
    probabilities: np.ndarray | None

    @property
    def degenerate(self) -> bool:
        return self.probabilities is None

    @property
    def pairs(self) -> list:
        return [(s, t, float(d)) for s, t, d in zip(self.state, self.target, self.dists)]


def greedy_match(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Bijection ``perm`` pairing ``a[i]`` with ``b[perm[i]]`` by ascending distance.

    Repeatedly takes the closest remaining pair; ties resolve by row, then column.
    """
    k = a.shape[0]
    d = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)
    order = np.argsort(d.ravel(), kind="stable")
    perm = np.full(k, -1)
    used_a = np.zeros(k, dtype=bool)
    used_b = np.zeros(k, dtype=bool)
    left = k
    for flat in order:
        i, j = divmod(int(flat), k)
        if used_a[i] or used_b[j]:
            continue
        perm[i] = j
        used_a[i] = used_b[j] = True
        left -= 1
        if left == 0:
            break
    return perm


def pair_from_centroids(state_centroids, target_centroids, degenerate_tol: float = 1e-9) -> PairedClusters:
    s = np.asarray(state_centroids, float).reshape(-1, 3)
    t = np.asarray(target_centroids, float).reshape(-1, 3)
    if s.shape != t.shape or s.shape[0] == 0:
        raise InvalidInputError("centroid sets must be non-empty and equally sized")
    t = t[greedy_match(s, t)]
    dists = np.linalg.norm(t - s, axis=1)
    total = float(dists.sum())
    probs = dists / total if total > degenerate_tol else None
    return PairedClusters(s, t, dists, probs)


def pair_clusters(state, target, k: int, seed: int = 0, max_iters: int = 100,
                  tol: float = 1e-9, degenerate_tol: float = 1e-9) -> PairedClusters:
    """Cluster both clouds into ``k`` regions (same seed) and pair the centroids."""
    cs = kmeans(state, k, seed, max_iters, tol)
    ct = kmeans(target, k, seed, max_iters, tol)
    return pair_from_centroids(cs.centroids, ct.centroids, degenerate_tol)


def sample_pair_indices(paired: PairedClusters, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` pair indices with replacement, proportional to pair separation."""
    if paired.degenerate:
        raise InvalidInputError("degenerate pairing has no sampling distribution")
    return rng.choice(paired.dists.shape[0], size=n, p=paired.probabilities)


def action_for_pair(mu_state, mu_target, cfg: SamplerConfig) -> GraspAction:
    """The grasp that pushes the state cluster toward its target cluster.

    The grasp center sits half a gripper opening beyond the state centroid
    along the unit push direction.  Yaw follows the push direction, and the
    final separation is half the distance from the center to the target
    centroid.  Position and separation are clamped to the workspace and
    finger limits.
    """
    mu_state = np.asarray(mu_state, float)
    mu_target = np.asarray(mu_target, float)
    delta = mu_target - mu_state
    norm = float(np.linalg.norm(delta))
    unit = delta / norm if norm > 0 else np.zeros(3)
    ee_width = cfg.gripper.d_max
    pos = mu_state + 0.5 * unit * ee_width
    rot_z = math.atan2(delta[1], delta[0])
    d = 0.5 * float(np.linalg.norm(mu_target - pos))
    d = min(max(d, cfg.gripper.d_min), cfg.gripper.d_max)
    pos = np.clip(pos, cfg.bounds[0], cfg.bounds[1])
    return GraspAction(pos[0], pos[1], pos[2], rot_z, d)


def actions_from_pairs(paired: PairedClusters, cfg: SamplerConfig,
                       rng: np.random.Generator) -> list:
    picks = sample_pair_indices(paired, cfg.n_samples, rng)
    return [action_for_pair(paired.state[i], paired.target[i], cfg) for i in picks]


def geometric_sample(state, target, cfg: SamplerConfig = SamplerConfig()) -> list:
    """Cluster-pairing sampler.

    Returns an empty list when state and target cluster identically, which
    callers treat as convergence.
    """
    if cfg.n_samples < 1:
        raise InvalidInputError("geometric sampling needs n_samples >= 1")
    paired = pair_clusters(state, target, cfg.n_clusters, cfg.seed, cfg.kmeans_iters,
                           cfg.kmeans_tol, cfg.degenerate_tol)
    if paired.degenerate:
        return []
    return actions_from_pairs(paired, cfg, np.random.default_rng(cfg.seed))


def random_sample(cfg: SamplerConfig = SamplerConfig()) -> list:
    """Uniform draws over the workspace box, yaw in [-π, π) and separation in [d_min, d_max]."""
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_samples
    lo = np.array([*cfg.bounds[0], -math.pi, cfg.gripper.d_min])
    hi = np.array([*cfg.bounds[1], math.pi, cfg.gripper.d_max])
    draws = rng.uniform(lo, hi, (n, 5))
    return [GraspAction(*row) for row in draws]
