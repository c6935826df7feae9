"""One-step model-predictive control over sampled grasps."""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple, Protocol

import numpy as np
from scipy.spatial import cKDTree

from .cloud import PointCloud, as_cloud, chamfer_distance, nearest_sqdist, sq_dist
from .dynamics import AnalyticDynamics, Dynamics, GraspAction, noop_action
from .errors import InvalidInputError
from .sampling import SamplerConfig, geometric_sample, random_sample

SAMPLERS = ("geometric", "random")


class Environment(Protocol):
    def step(self, cloud: PointCloud, action: GraspAction) -> PointCloud: ...


class ChamferScorer:
    """Chamfer distance to a fixed target for many small edits of one state.

    Only points that differ from the state are re-queried.  Both directed
    sums use ``math.fsum`` over the same per-point minima a full computation
    produces, so :meth:`score` equals ``chamfer_distance(pred, target)``
    exactly.
    """

    def __init__(self, state, target, full_fraction: float = 0.5, backup: int = 16,
                 brute_limit: int = 20000):
        self.brute_limit = brute_limit
        self.state = as_cloud(state).points
        self.target = as_cloud(target).points
        self.full_fraction = full_fraction
        self.target_tree = cKDTree(self.target)
        self.state_tree = state_tree = cKDTree(self.state)
        self.fwd = nearest_sqdist(self.state, self.target, self.target_tree)
        # nearest state points of every target point, nearest first
        k = min(backup, self.state.shape[0])
        _, near = state_tree.query(self.target, k=k)
        self.near = near.reshape(self.target.shape[0], k)
        self.bwd_idx = self.near[:, 0]
        self.bwd = sq_dist(self.target, self.state[self.bwd_idx])
        self.base = math.fsum(self.fwd.tolist()) + math.fsum(self.bwd.tolist())

    def score(self, pred) -> float:
        pts = as_cloud(pred).points
        if pts is self.state:
            return self.base
        if pts.shape != self.state.shape:
            return self._full(pts)
        changed = np.any(pts != self.state, axis=1)
        moved = np.flatnonzero(changed)
        if moved.size == 0:
            return self.base
        if moved.size > self.full_fraction * pts.shape[0]:
            return self._full(pts)

        fwd = self.fwd.copy()
        fwd[moved] = nearest_sqdist(pts[moved], self.target, self.target_tree)

        bwd = self.bwd.copy()
        lost = np.flatnonzero(changed[self.bwd_idx])
        if lost.size:
            # first unchanged state point in each lost target's neighbour list
            still = ~changed[self.near[lost]]
            first = np.argmax(still, axis=1)
            found = still[np.arange(lost.size), first]
            hit = lost[found]
            bwd[hit] = sq_dist(self.target[hit], self.state[self.near[hit, first[found]]])
            miss = lost[~found]
            if miss.size:
                kept = self.state[~changed]
                bwd[miss] = nearest_sqdist(self.target[miss], kept) if kept.shape[0] else np.inf
        # moved points can only win where they beat the current best
        mp = pts[moved]
        gap = np.maximum(np.maximum(mp.min(axis=0) - self.target, self.target - mp.max(axis=0)), 0.0)
        reach = sq_dist(gap, np.zeros(3))
        check = np.flatnonzero(reach < bwd)
        if check.size:
            best = bwd[check]
            if check.size * mp.shape[0] <= self.brute_limit:
                cand = sq_dist(self.target[check][:, None, :], mp[None, :, :]).min(axis=1)
            else:
                cand = nearest_sqdist(self.target[check], mp, upper=float(best.max()))
            bwd[check] = np.minimum(best, cand)
        return math.fsum(fwd.tolist()) + math.fsum(bwd.tolist())

    def _full(self, pts) -> float:
        fwd = nearest_sqdist(pts, self.target, self.target_tree)
        bwd = nearest_sqdist(self.target, pts)
        return math.fsum(fwd.tolist()) + math.fsum(bwd.tolist())


class Evaluation(NamedTuple):
    index: int
    action: GraspAction
    cloud: PointCloud
    cd: float


def evaluate_candidates(state, target, actions, dynamics: Dynamics | None = None,
                        workers: int = 1) -> Evaluation:
    """Roll the dynamics for every action and return the lowest-Chamfer prediction.

    Ties go to the lowest action index, so threaded evaluation
    (``workers > 1``) picks the same winner as the sequential loop.
    """
    actions = list(actions)
    if not actions:
        raise InvalidInputError("no candidate actions")
    state = as_cloud(state)
    target = as_cloud(target)
    dynamics = dynamics or AnalyticDynamics()
    if hasattr(dynamics, "graph_for"):
        dynamics.graph_for(state)
    scorer = ChamferScorer(state, target)

    def run(i):
        pred = dynamics.predict(state, actions[i])
        return scorer.score(pred), i, pred

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, range(len(actions))))
    else:
        results = map(run, range(len(actions)))
    best = None
    for cd, i, pred in results:
        if best is None or cd < best[0]:
            best = (cd, i, pred)
    cd, i, pred = best
    return Evaluation(i, actions[i], pred, cd)


@dataclass(frozen=True)
class PlannerConfig:
    sampler: str = "geometric"
    sampler_cfg: SamplerConfig = SamplerConfig()
    max_grasps: int = 10
    cd_stop_threshold: float | None = None
    stop_fraction: float = 0.02
    include_noop: bool = True
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.sampler not in SAMPLERS:
            raise InvalidInputError(f"sampler must be one of {SAMPLERS}, got {self.sampler!r}")
        if self.max_grasps < 1:
            raise InvalidInputError("max_grasps must be >= 1")


@dataclass(frozen=True, eq=False)
class PlanStep:
    step: int
    action: GraspAction
    predicted: PointCloud
    predicted_cd: float
    candidates_evaluated: int
    realized: PointCloud | None = None
    realized_cd: float | None = None
    wall_time: float = 0.0
    converged: bool = False
    noop: bool = False

    def with_realized(self, cloud: PointCloud, cd: float, wall_time: float) -> "PlanStep":
        return PlanStep(self.step, self.action, self.predicted, self.predicted_cd,
                        self.candidates_evaluated, cloud, cd, wall_time, self.converged, self.noop)

    def to_record(self) -> dict:
        """JSON-ready record; timing is left out so logs are reproducible byte for byte."""
        return {
            "step": self.step,
            "action": self.action.to_dict(),
            "predicted_cd": self.predicted_cd,
            "realized_cd": self.realized_cd,
            "candidates_evaluated": self.candidates_evaluated,
            "converged": self.converged,
            "noop": self.noop,
        }


class SculptAborted(RuntimeError):
    """The environment failed mid-run; ``log`` holds the completed steps."""

    def __init__(self, log, cause):
        super().__init__(f"environment failed after {len(log)} steps: {cause}")
        self.log = log
        self.cause = cause


def step_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, step]).generate_state(1, np.uint64)[0] >> 1)


def _noop_for(cfg: PlannerConfig) -> GraspAction:
    lo, hi = cfg.sampler_cfg.bounds
    center = (np.asarray(lo, float) + np.asarray(hi, float)) / 2
    return noop_action(cfg.sampler_cfg.gripper, center)


def sample_candidates(state, target, cfg: PlannerConfig, step: int = 0) -> list:
    scfg = cfg.sampler_cfg.with_seed(step_seed(cfg.seed, step))
    if cfg.sampler == "geometric":
        return geometric_sample(state, target, scfg)
    return random_sample(scfg)


def plan_step(state, target, cfg: PlannerConfig = PlannerConfig(), dynamics: Dynamics | None = None,
              step: int = 0) -> PlanStep:
    """Sample candidates, append the no-op if configured, and pick the best prediction."""
    state = as_cloud(state)
    dynamics = dynamics or AnalyticDynamics(cfg.sampler_cfg.gripper)
    candidates = sample_candidates(state, target, cfg, step)
    noop = _noop_for(cfg)
    if cfg.sampler == "geometric" and not candidates:
        return PlanStep(step, noop, state, chamfer_distance(state, target), 1 if cfg.include_noop else 0,
                        converged=True, noop=True)
    n_sampled = len(candidates)
    if cfg.include_noop:
        candidates.append(noop)
    best = evaluate_candidates(state, target, candidates, dynamics, cfg.workers)
    return PlanStep(step, best.action, best.cloud, best.cd, len(candidates),
                    noop=cfg.include_noop and best.index == n_sampled)


def run_sculpt_loop(initial, target, cfg: PlannerConfig = PlannerConfig(),
                    dynamics: Dynamics | None = None, environment: Environment | None = None) -> list:
    """Closed-loop sculpting.

    Each iteration plans one step, executes it in ``environment`` and
    continues from the realized cloud.  The loop ends when the realized
    Chamfer distance drops below the stop threshold, the geometric sampler
    reports convergence, or ``max_grasps`` grasps have run.  A winning
    no-op is still executed; the next step re-samples with a fresh seed.
    """
    from .sim import SimEnvironment

    state = as_cloud(initial)
    target = as_cloud(target)
    dynamics = dynamics or AnalyticDynamics(cfg.sampler_cfg.gripper)
    environment = environment or SimEnvironment(dynamics=dynamics)
    current = chamfer_distance(state, target)
    threshold = cfg.cd_stop_threshold if cfg.cd_stop_threshold is not None else cfg.stop_fraction * current
    log = []
    if current == 0.0:
        return log
    for step in range(cfg.max_grasps):
        t0 = time.perf_counter()
        planned = plan_step(state, target, cfg, dynamics, step)
        if planned.converged:
            log.append(planned.with_realized(state, current, time.perf_counter() - t0))
            break
        try:
            realized = as_cloud(environment.step(state, planned.action))
        except Exception as e:  # noqa: BLE001 - any environment fault ends the run
            raise SculptAborted(log, e) from e
        current = chamfer_distance(realized, target)
        log.append(planned.with_realized(realized, current, time.perf_counter() - t0))
        state = realized
        if current < threshold:
            break
    return log
