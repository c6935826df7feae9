import numpy as np
import pytest

from claysculpt.cloud import PointCloud, chamfer_distance
from claysculpt.dynamics import AnalyticDynamics, GraspAction
from claysculpt.errors import InvalidInputError
from claysculpt.planner import (ChamferScorer, PlannerConfig, SculptAborted, evaluate_candidates, plan_step,
                                run_sculpt_loop, step_seed)
from claysculpt.sampling import SamplerConfig, random_sample
from claysculpt.sim import make_initial_clay, make_target
from oracles import brute_chamfer

STATE = make_initial_clay(512, 0)
TARGET = make_target("line", 512, 0).cloud


def test_scorer_matches_full_chamfer():
    scorer = ChamferScorer(STATE, TARGET)
    dyn = AnalyticDynamics()
    for a in random_sample(SamplerConfig(n_samples=40, seed=1)):
        pred = dyn.predict(STATE, a)
        assert scorer.score(pred) == chamfer_distance(pred, TARGET)
    assert scorer.score(STATE) == chamfer_distance(STATE, TARGET)


def test_scorer_matches_oracle_on_arbitrary_edits():
    rng = np.random.default_rng(0)
    a, b = rng.uniform(-1, 1, (300, 3)), rng.uniform(-1, 1, (200, 3))
    scorer = ChamferScorer(a, b)
    for frac in (0.0, 0.01, 0.3, 1.0):
        p = a.copy()
        idx = rng.choice(300, int(frac * 300), replace=False)
        p[idx] += rng.normal(0, 0.3, (len(idx), 3))
        assert scorer.score(p) == pytest.approx(brute_chamfer(p, b), rel=1e-12)
        assert scorer.score(p) == chamfer_distance(p, b)


def test_plan_step_candidate_counts():
    geo = plan_step(STATE, TARGET, PlannerConfig())
    assert geo.candidates_evaluated == 36
    rnd = plan_step(STATE, TARGET, PlannerConfig("random", SamplerConfig(n_samples=2500)))
    assert rnd.candidates_evaluated == 2501
    no = plan_step(STATE, TARGET, PlannerConfig(include_noop=False))
    assert no.candidates_evaluated == 35


def test_plan_step_picks_minimum():
    cfg = PlannerConfig("random", SamplerConfig(n_samples=30), seed=2)
    step = plan_step(STATE, TARGET, cfg)
    dyn = AnalyticDynamics()
    from claysculpt.planner import sample_candidates
    cds = [chamfer_distance(dyn.predict(STATE, a), TARGET) for a in sample_candidates(STATE, TARGET, cfg)]
    assert step.predicted_cd <= min(cds + [chamfer_distance(STATE, TARGET)])
    assert step.predicted_cd == chamfer_distance(step.predicted, TARGET)


def test_converged_step():
    step = plan_step(STATE, STATE, PlannerConfig())
    assert step.converged and step.noop
    log = run_sculpt_loop(STATE, PointCloud(STATE.points.copy()))
    assert log == []


def test_loop_monotone_with_noop():
    cfg = PlannerConfig(max_grasps=4, seed=1)
    log = run_sculpt_loop(STATE, TARGET, cfg)
    cds = [chamfer_distance(STATE, TARGET)] + [s.realized_cd for s in log]
    assert all(b <= a for a, b in zip(cds, cds[1:]))
    assert 1 <= len(log) <= 4
    for s in log:
        assert s.realized_cd == s.predicted_cd


def test_max_grasps_and_stop_threshold():
    log = run_sculpt_loop(STATE, TARGET, PlannerConfig(max_grasps=1))
    assert len(log) == 1
    log = run_sculpt_loop(STATE, TARGET, PlannerConfig(cd_stop_threshold=1e9))
    assert len(log) == 1


def test_threaded_matches_sequential():
    acts = random_sample(SamplerConfig(n_samples=60, seed=3))
    a = evaluate_candidates(STATE, TARGET, acts, workers=1)
    b = evaluate_candidates(STATE, TARGET, acts, workers=4)
    assert a.index == b.index and a.cd == b.cd
    with pytest.raises(InvalidInputError):
        evaluate_candidates(STATE, TARGET, [])


def test_ties_go_to_lowest_index():
    a = GraspAction(0.0, 0.0, 0.01, 0.0, 0.02)
    assert evaluate_candidates(STATE, TARGET, [a, a, a], workers=3).index == 0


def test_environment_failure_aborts_with_log():
    class Flaky:
        calls = 0

        def step(self, cloud, action):
            self.calls += 1
            if self.calls == 2:
                raise RuntimeError("gripper fault")
            return AnalyticDynamics().predict(cloud, action)

    with pytest.raises(SculptAborted) as exc:
        run_sculpt_loop(STATE, TARGET, PlannerConfig(max_grasps=5), environment=Flaky())
    assert len(exc.value.log) == 1


def test_step_seed_and_config():
    assert step_seed(0, 1) == step_seed(0, 1) != step_seed(0, 2)
    with pytest.raises(InvalidInputError):
        PlannerConfig(sampler="greedy")
    with pytest.raises(InvalidInputError):
        PlannerConfig(max_grasps=0)


def test_loop_deterministic():
    cfg = PlannerConfig(max_grasps=2, seed=5)
    a = [s.to_record() for s in run_sculpt_loop(STATE, TARGET, cfg)]
    b = [s.to_record() for s in run_sculpt_loop(STATE, TARGET, cfg)]
    assert a == b
