import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import confusion_oracle
from semloc.config import PipelineConfig
from semloc.evaluation import (EvalThresholds, TrialRecord, best_f1, pr_auc, pr_curve, pr_to_csv, run_sequence,
                               success_at, success_rate_curve, success_to_csv, trials_from_csv, trials_to_csv)
from semloc.graph import SemanticGraph
from semloc.pipeline import Localizer, build_database
from semloc.synth import TrajectorySpec, simulate_dataset


def record(i, err, vote, attempted=True):
    if not attempted:
        return TrialRecord(i, np.full(3, np.nan), np.zeros(3), 0, np.inf, False)
    return TrialRecord(i, np.array([err, 0.0, 0.0]), np.zeros(3), 5, vote, True)


records_st = st.lists(st.tuples(st.booleans(), st.floats(0, 60), st.floats(0, 15)), min_size=1, max_size=40)
SWEEP = (0.5, 1.0, 2.0, 4.0, 8.0, 16.0)


def test_pr_conventions():
    th = EvalThresholds(20.0, (1.0, 5.0))
    # nothing predicted positive: precision 1, recall 0
    assert pr_curve([record(0, 1.0, 3.0)], th)[0] == (1.0, 1.0, 0.0)
    assert pr_curve([record(0, 1.0, 3.0)], th)[1] == (5.0, 1.0, 1.0)
    # no true localizations at all: recall 0
    assert pr_curve([record(0, 50.0, 3.0)], th)[1] == (5.0, 0.0, 0.0)
    # non-attempted windows are missed positives
    assert pr_curve([record(0, 1.0, 3.0), record(1, 0, 0, False)], th)[1] == (5.0, 1.0, 0.5)
    with pytest.raises(ValueError):
        pr_curve([], th)


@settings(max_examples=60)
@given(records_st)
def test_pr_matches_confusion_oracle(rows):
    recs = [record(i, e, v, a) for i, (a, e, v) in enumerate(rows)]
    th = EvalThresholds(20.0, SWEEP)
    curve = pr_curve(recs, th)
    recalls = [r for _, _, r in curve]
    assert recalls == sorted(recalls)
    for t_c, p, r in curve:
        tp, fp, fn = confusion_oracle(rows, 20.0, t_c)
        assert p == (tp / (tp + fp) if tp + fp else 1.0)
        assert r == (tp / (tp + fn) if tp + fn else 0.0)
    assert 0.0 <= pr_auc(curve) <= 1.0


@settings(max_examples=60)
@given(records_st, st.floats(1.0, 100.0), st.integers(1, 30))
def test_success_curve_matches_counting(rows, max_distance, bins):
    recs = [record(i, e, v, a) for i, (a, e, v) in enumerate(rows)]
    curve = success_rate_curve(recs, max_distance, bins)
    errs = [e for a, e, _ in rows if a]
    assert len(curve) == bins
    fracs = [f for _, f in curve]
    assert fracs == sorted(fracs)
    for d, f in curve:
        expected = sum(e <= d for e in errs) / len(errs) if errs else 0.0
        assert f == pytest.approx(expected, abs=1e-12)


def test_auc_and_best_f1():
    curve = [(1.0, 1.0, 0.2), (2.0, 0.8, 0.6), (3.0, 0.5, 1.0)]
    assert pr_auc(curve) == pytest.approx(0.2 + 0.4 * 0.8 + 0.4 * 0.5)
    t_c, p, r, f1 = best_f1(curve)
    assert t_c == 2.0 and f1 == pytest.approx(2 * 0.8 * 0.6 / 1.4)


def test_success_at():
    recs = [record(0, 1.0, 1.0), record(1, 30.0, 1.0), record(2, 2.0, 9.0), record(3, 0, 0, False)]
    assert success_at(recs, 5.0, 20.0) == 0.5
    assert success_at(recs, 0.1, 20.0) == 0.0


def test_threshold_validation():
    with pytest.raises(ValueError):
        EvalThresholds(0.0, (1.0,))
    with pytest.raises(ValueError):
        EvalThresholds(1.0, (2.0, 1.0))
    assert EvalThresholds.from_config(PipelineConfig()).t_L == 20.0


def test_trials_csv_round_trip():
    recs = [record(0, 1.25, 0.5), record(4, 0, 0, False), record(9, 3.0 + 1e-13, 2.0)]
    text = trials_to_csv(recs)
    back = trials_from_csv(text)
    assert all(a.same_as(b) for a, b in zip(recs, back)) and len(back) == 3
    assert trials_to_csv(back) == text


@pytest.mark.parametrize("text", [
    "",
    "a,b\n1,2\n",
    trials_to_csv([record(0, 1.0, 1.0)]) + "1,2,3\n",
    trials_to_csv([record(0, 1.0, 1.0)]).replace(",1\n", ",7\n"),
    trials_to_csv([record(0, 1.0, 1.0)]).replace("1.0,0.0,0.0,0.0", "nan,0.0,0.0,0.0", 1),
])
def test_trials_csv_rejects_malformed(text):
    with pytest.raises(ValueError):
        trials_from_csv(text)


def test_curve_csv():
    assert pr_to_csv([(1.0, 0.5, 0.25)]) == "t_c,precision,recall\n1.0,0.5,0.25\n"
    assert success_to_csv([(2.0, 1.0)]) == "distance,fraction\n2.0,1.0\n"


@pytest.fixture(scope="module")
def self_localization(small_world, camera):
    traj = TrajectorySpec("forward", path=((5.0, 45.0), (130.0, 45.0)), step=5.0)
    sim = simulate_dataset(small_world, traj, camera)
    cfg = PipelineConfig().with_overrides({"walks.num_walks": 100})
    db, desc = build_database(sim.frames, cfg)
    return sim, cfg, Localizer(db, desc, cfg)


def test_self_localization(self_localization):
    sim, cfg, loc = self_localization
    recs = run_sequence(sim.frames, sim.gt_poses, loc, cfg)
    assert len(recs) == len(sim.frames) - cfg.graph.query_frames + 1
    good = sum(r.attempted and r.error <= cfg.localization_threshold for r in recs)
    assert good >= 0.95 * len(recs)


def test_empty_database_never_attempts(self_localization):
    sim, cfg, _ = self_localization
    recs = run_sequence(sim.frames[:8], sim.gt_poses[:8], Localizer(SemanticGraph(), {}, cfg), cfg)
    assert len(recs) == 4 and not any(r.attempted for r in recs)
    curve = pr_curve(recs, EvalThresholds.from_config(cfg))
    assert all(p == 1.0 and r == 0.0 for _, p, r in curve)
