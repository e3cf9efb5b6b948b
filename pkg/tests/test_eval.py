import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wsn_anomaly import eval as ev
from wsn_anomaly.errors import ConfigError, DimensionError, UndefinedMetricError

from oracles import confusion_loops, mann_whitney_auc

# Hand-built 10-cell fixture: 3 TP, 1 FP, 1 FN, 5 TN.
PRED = [1, 1, 1, 1, 0, 0, 0, 0, 0, 0]
TRUTH = [1, 1, 1, 0, 1, 0, 0, 0, 0, 0]


def test_confusion_hand_fixture():
    c = ev.confusion(PRED, TRUTH)
    assert (c.tp, c.fp, c.fn, c.tn) == (3, 1, 1, 5)
    assert c.total == 10


def test_confusion_trivial_cases():
    z = np.zeros((2, 3), dtype=int)
    assert ev.confusion(z, z).tn == 6
    t = np.array([[1, 0, 1], [0, 0, 1]])
    c = ev.confusion(1 - t, t)
    assert c.tp == 0 and c.tn == 0


def test_confusion_shape_and_value_checks():
    with pytest.raises(DimensionError):
        ev.confusion([0, 1], [0, 1, 1])
    with pytest.raises(ConfigError):
        ev.confusion([0, 2], [0, 1])


def test_precision_recall_f1_formulas():
    p, r, f1, flags = ev.precision_recall_f1(ev.ConfusionCounts(tp=3, tn=5, fp=1, fn=1))
    assert p == 0.75 and r == 0.75 and f1 == 0.75 and flags == []


def test_f1_from_reported_precision_and_recall():
    p, r = 0.947, 0.923
    assert abs(2 * p * r / (p + r) - 0.9349) <= 0.0005


def test_zero_denominators_flagged():
    p, r, f1, flags = ev.precision_recall_f1(ev.ConfusionCounts(0, 10, 0, 0))
    assert (p, r, f1) == (0.0, 0.0, 0.0)
    assert flags == ["precision", "recall", "f1"]
    p, r, f1, flags = ev.precision_recall_f1(ev.ConfusionCounts(0, 5, 0, 3))
    assert p == 0.0 and r == 0.0 and "precision" in flags and "recall" not in flags


def test_auc_perfect_and_chance():
    assert ev.auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert ev.auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0
    assert ev.auc(np.full(10, 0.3), [0, 1] * 5) == 0.5


@pytest.mark.parametrize("seed", range(20))
def test_auc_equals_pairwise_oracle_exactly(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 200))
    scores = np.round(rng.standard_normal(n), int(rng.integers(0, 3)))  # plenty of ties
    truth = rng.integers(0, 2, n)
    truth[0], truth[1] = 0, 1
    assert ev.auc(scores, truth) == mann_whitney_auc(scores.tolist(), truth.tolist())


def test_auc_single_class_undefined():
    with pytest.raises(UndefinedMetricError):
        ev.auc([0.1, 0.2], [0, 0])
    with pytest.raises(UndefinedMetricError):
        ev.auc([0.1, 0.2], [1, 1])


def test_auc_rejects_nan():
    with pytest.raises(ConfigError):
        ev.auc([np.nan, 0.2], [0, 1])


def test_roc_curve_endpoints():
    fpr, tpr = ev.roc_curve([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
    assert (fpr[0], tpr[0], fpr[-1], tpr[-1]) == (0, 0, 1, 1)
    assert np.all(np.diff(fpr) >= 0) and np.all(np.diff(tpr) >= 0)


def test_evaluate_report_json():
    r = ev.evaluate(PRED, TRUTH, np.array(PRED, float) + np.linspace(0, 0.1, 10))
    d = json.loads(r.to_json())
    assert set(d) == {"precision", "recall", "f1", "auc", "counts", "degenerate"}
    assert d["counts"] == {"tp": 3, "tn": 5, "fp": 1, "fn": 1}


def test_evaluate_flags_undefined_auc():
    r = ev.evaluate([0, 0], [0, 0], [0.1, 0.2])
    assert r.auc is None and "auc" in r.degenerate


def _resample_inputs(seed=0, windows=18):
    rng = np.random.default_rng(seed)
    scores = rng.uniform(size=(windows, 2, 5))
    truth = (rng.uniform(size=scores.shape) < 0.2).astype(int)
    scores = scores + truth
    return scores, truth


def test_reliability_resample_deterministic_and_sample_statistics():
    s, t = _resample_inputs()
    a = ev.reliability_resample(s, t, 1.0, seed=7)
    b = ev.reliability_resample(s, t, 1.0, seed=7)
    assert [r.to_dict() for r in a.trials] == [r.to_dict() for r in b.trials]
    assert len(a.trials) == 10
    f1 = np.array([r.f1 for r in a.trials])
    assert a.mean["f1"] == pytest.approx(f1.mean())
    assert a.var["f1"] == pytest.approx(f1.var(ddof=1))
    assert a.std["f1"] == pytest.approx(np.sqrt(f1.var(ddof=1)))


def test_reliability_single_trial_has_zero_variance():
    s, t = _resample_inputs()
    r = ev.reliability_resample(s, t, 1.0, trials=1)
    assert r.var["precision"] == 0.0 and r.mean["precision"] == r.trials[0].precision


def test_reliability_constant_metric_zero_std():
    s, t = _resample_inputs()
    r = ev.reliability_resample(s, t, 1.0, segments=9, pick=9, trials=4)
    assert r.std["f1"] == 0.0


@pytest.mark.parametrize("kw", [dict(segments=3, pick=4), dict(pick=0), dict(trials=0),
                                dict(segments=40, pick=2)])
def test_reliability_bad_arguments(kw):
    s, t = _resample_inputs()
    with pytest.raises(ConfigError):
        ev.reliability_resample(s, t, 1.0, **kw)


def test_robustness_sweep_argument_checks():
    with pytest.raises(ConfigError):
        ev.robustness_sweep(None, None, [], 0.01, 0)
    with pytest.raises(ConfigError):
        ev.robustness_sweep(None, None, [1.0, 0.0], 0.01, 0)


def test_sweep_csv(tmp_path):
    rows = [(1.0, ev.evaluate(PRED, TRUTH, PRED)), (-0.5, ev.evaluate([0, 0], [0, 0]))]
    ev.write_sweep_csv(rows, tmp_path / "s.csv")
    with open(tmp_path / "s.csv") as fh:
        got = list(csv.DictReader(fh))
    assert got[0]["alpha"] == "1.0" and got[0]["tp"] == "3"
    assert got[1]["auc"] == ""


labels = st.lists(st.integers(0, 1), min_size=2, max_size=60)


@settings(max_examples=100, deadline=None)
@given(st.data())
def test_metric_properties(data):
    truth = data.draw(labels)
    n = len(truth)
    pred = data.draw(st.lists(st.integers(0, 1), min_size=n, max_size=n))
    scores = data.draw(st.lists(st.integers(0, 5), min_size=n, max_size=n))
    c = ev.confusion(pred, truth)
    assert (c.tp, c.tn, c.fp, c.fn) == confusion_loops(pred, truth)
    assert c.total == n
    p, r, f1, _ = ev.precision_recall_f1(c)
    assert 0 <= p <= 1 and 0 <= r <= 1 and 0 <= f1 <= 1
    assert f1 <= (p + r) / 2 + 1e-15
    assert ev.precision_recall_f1(ev.ConfusionCounts(c.tp, c.tn, c.fn, c.fp))[2] == pytest.approx(
        2 * p * r / (p + r) if p + r else 0.0)
    perm = np.random.default_rng(n).permutation(n)
    c2 = ev.confusion(np.array(pred)[perm], np.array(truth)[perm])
    assert c2 == c
    if 0 < sum(truth) < n:
        a = ev.auc(scores, truth)
        assert 0 <= a <= 1
        assert a == mann_whitney_auc(scores, truth)
        assert ev.auc(np.array(scores)[perm], np.array(truth)[perm]) == a
