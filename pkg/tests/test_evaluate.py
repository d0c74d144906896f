import json
import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vertloc.evaluate import RegionReport, build_report, plot_per_vertebra, score_scan
from vertloc.volume import CentroidSet

from oracles import nearest_truth_flags


def test_identity_scores_perfect():
    truth = CentroidSet({1: (0, 0, 0), 8: (0, 0, 40), 20: (0, 0, 80)})
    s = score_scan(truth, truth)
    assert all(s.id_correct.values()) and s.mean_error == 0 and s.id_rate == 1.0


def test_nearest_wrong_label():
    truth = CentroidSet({"L1": (0, 0, 0), "L2": (0, 0, 30)})
    s = score_scan(CentroidSet({"L1": (0, 0, 25)}), truth)
    assert s.errors == {20: 25.0}
    assert s.id_correct == {20: False}


def test_20mm_rule():
    truth = CentroidSet({"C3": (0, 0, 0)})
    s = score_scan(CentroidSet({"C3": (0, 0, 19)}), truth)
    assert s.errors == {3: 19.0} and s.id_correct == {3: True}
    s = score_scan(CentroidSet({"C3": (0, 0, 20)}), truth)
    assert s.id_correct == {3: False}


def test_prediction_absent_from_truth():
    truth = CentroidSet({"L1": (0, 0, 0)})
    s = score_scan(CentroidSet({"L1": (0, 0, 1), "S1": (0, 0, 100)}), truth)
    assert s.errors == {20: 1.0}
    assert s.id_correct == {20: True, 25: False}


def test_report_pooled_mean_and_population_std():
    truth_a = CentroidSet({20: (0, 0, 0), 21: (0, 0, 30)})
    truth_b = CentroidSet({22: (0, 0, 0)})
    a = score_scan(CentroidSet({20: (3, 0, 0), 21: (0, 5, 30)}), truth_a)
    b = score_scan(CentroidSet({22: (0, 0, 7)}), truth_b)
    rep = build_report([a, b])
    lumbar = rep.regions["lumbar"]
    assert rep.regions["all"].mean == 5.0
    assert rep.regions["all"].std == pytest.approx(math.sqrt(8 / 3))
    assert lumbar.mean == 5.0 and rep.regions["all"].id_rate == 100.0


def test_report_perfect_every_region():
    truth = CentroidSet({k: (0, 0, 40.0 * k) for k in range(1, 27)})
    rep = build_report([score_scan(truth, truth)])
    for name in ("all", "cervical", "thoracic", "lumbar", "sacral"):
        r = rep.regions[name]
        assert (r.id_rate, r.mean, r.std) == (100.0, 0.0, 0.0)


def test_report_counts_add_up():
    rng = np.random.default_rng(0)
    scores = []
    for _ in range(5):
        labels = sorted(rng.choice(np.arange(1, 27), 6, replace=False))
        truth = CentroidSet({k: rng.uniform(0, 300, 3) for k in labels})
        pred = CentroidSet({k: truth[k] + rng.normal(0, 8, 3) for k in labels[:4]})
        scores.append(score_scan(pred, truth))
    rep = build_report(scores)
    parts = ("cervical", "thoracic", "lumbar", "sacral")
    for attr in ("n_truth", "n_pred", "n_correct"):
        assert getattr(rep.regions["all"], attr) == sum(getattr(rep.regions[p], attr) for p in parts)
    assert len(rep.regions["all"].errors) == sum(len(v) for v in rep.per_vertebra.values())


def test_missed_vertebrae_lower_id_rate():
    truth = CentroidSet({20: (0, 0, 0), 21: (0, 0, 30)})
    s = score_scan(CentroidSet({20: (0, 0, 1)}), truth)
    r = build_report([s]).regions["all"]
    assert r.id_rate == 50.0 and r.id_rate_pred == 100.0


def test_empty_report_rejected():
    with pytest.raises(ValueError):
        build_report([])


def _random_sets(seed):
    rng = np.random.default_rng(seed)
    labels = sorted(rng.choice(np.arange(1, 27), 5, replace=False))
    truth = {int(k): rng.uniform(-100, 100, 3) for k in labels}
    pred = {int(k): truth[k] + rng.normal(0, 15, 3) for k in labels if rng.random() < 0.8}
    return truth, pred


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), shift=st.tuples(*[st.floats(-500, 500)] * 3))
def test_translation_invariance(seed, shift):
    truth, pred = _random_sets(seed)
    a = score_scan(CentroidSet(pred), CentroidSet(truth))
    b = score_scan(CentroidSet(pred).translated(shift), CentroidSet(truth).translated(shift))
    assert a.id_correct == b.id_correct
    assert a.mean_error == pytest.approx(b.mean_error, nan_ok=True, abs=1e-7)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_errors_and_flags_match_brute_force(seed):
    truth, pred = _random_sets(seed)
    s = score_scan(CentroidSet(pred), CentroidSet(truth))
    for k, p in pred.items():
        assert s.errors[k] == pytest.approx(math.dist(p, truth[k]), rel=1e-12)
    assert s.id_correct == nearest_truth_flags(pred, truth)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_removing_correct_prediction_never_raises_id_rate(seed):
    truth, pred = _random_sets(seed)
    s = score_scan(CentroidSet(pred), CentroidSet(truth))
    for k, ok in s.id_correct.items():
        if ok:
            rest = {j: p for j, p in pred.items() if j != k}
            assert score_scan(CentroidSet(rest), CentroidSet(truth)).id_rate <= s.id_rate


def test_report_json_roundtrip(tmp_path):
    truth = CentroidSet({3: (0, 0, 0), 20: (0, 0, 50)})
    rep = build_report([score_scan(CentroidSet({3: (1, 0, 0), 20: (0, 2, 50)}), truth)])
    rep.save(tmp_path / "r.json")
    back = RegionReport.from_dict(json.loads((tmp_path / "r.json").read_text()))
    assert back.to_dict() == rep.to_dict()
    assert "Cervical" in rep.table() and "Thoracic" not in rep.table()


def test_plot_single_box(tmp_path):
    truth = CentroidSet({"L1": (0, 0, 0)})
    rep = build_report([score_scan(CentroidSet({"L1": (0, 0, 4)}), truth)])
    names = plot_per_vertebra(rep, tmp_path / "p.png")
    assert names == ["L1"] and (tmp_path / "p.png").stat().st_size > 0


def test_plot_logs_empty_regions(tmp_path, caplog):
    truth = CentroidSet({"L1": (0, 0, 0)})
    rep = build_report([score_scan(truth, truth)])
    with caplog.at_level(logging.INFO, logger="vertloc.evaluate"):
        plot_per_vertebra(rep, tmp_path / "p.png")
    assert any("cervical" in r.message for r in caplog.records)


def test_plot_full_ordering(tmp_path):
    truth = CentroidSet({k: (0, 0, 40.0 * k) for k in range(1, 27)})
    pred = CentroidSet({k: (1, 0, 40.0 * k) for k in reversed(range(1, 27))})
    rep = build_report([score_scan(pred, truth)])
    names = plot_per_vertebra(rep, tmp_path / "p.png")
    assert names[0] == "C1" and names[-1] == "S2" and len(names) == 26


def test_plot_unwritable(tmp_path):
    truth = CentroidSet({"L1": (0, 0, 0)})
    rep = build_report([score_scan(truth, truth)])
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        plot_per_vertebra(rep, blocker / "p.png")
