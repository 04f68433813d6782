import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from cxrtriage import evaluation as E
from oracles import auc_pairs_naive


def test_confusion_examples():
    y = np.array([[1, 0], [0, 1], [1, 1], [0, 0]])
    (a, b) = E.confusion(y.astype(float), y, 0.5)
    assert a.fp == a.fn == 0 and b.fp == b.fn == 0
    (a, _) = E.confusion(np.zeros((4, 2)), y, 0.5)
    assert (a.tp, a.fp, a.fn, a.tn) == (0, 0, 2, 2)


def test_confusion_tie_counts_positive():
    (c,) = E.confusion(np.array([0.5]), np.array([0]), 0.5)
    assert c.fp == 1


def test_rates_and_degenerate_flag():
    c = E.ConfusionCounts(tp=9, fp=1, fn=3, tn=7)
    assert E.precision(c) == 0.9 and E.recall(c) == 0.75
    assert E.specificity(c) == 7 / 8 and E.npv(c) == 0.7 and E.accuracy(c) == 0.8
    p = E.precision(E.ConfusionCounts(0, 0, 4, 4))
    assert p == 0.0 and p.degenerate
    assert not E.precision(c).degenerate


def test_f1_table_values():
    assert abs(E.f1(0.935792, 0.977640) - 0.956259) <= 5e-6
    assert abs(E.f1(0.941542, 0.842984) - 0.889542) <= 5e-6
    assert E.f1(0.0, 0.0) == 0.0


@given(st.floats(0.001, 1.0))
def test_f1_fixed_point(v):
    assert E.f1(v, v) == pytest.approx(v, rel=1e-12)


def test_auc_four_point_case():
    s, y = [0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]
    assert E.auc_trapezoid(s, y) == 0.75
    assert E.auc_mann_whitney(s, y) == 0.75


def test_auc_perfect_and_undefined():
    assert E.auc_trapezoid([0.1, 0.2, 0.9], [0, 0, 1]) == 1.0
    with pytest.raises(E.UndefinedAUC):
        E.roc_auc([0.1, 0.2], [1, 1])


@given(st.integers(2, 60), st.integers(0, 2 ** 32 - 1), st.integers(2, 10))
def test_auc_methods_agree_with_ties(n, seed, levels):
    rng = np.random.default_rng(seed)
    s = rng.integers(0, levels, n) / levels
    y = rng.integers(0, 2, n)
    if y.min() == y.max():
        y[0] = 1 - y[0]
    r = E.roc_auc(s, y)
    assert abs(r.auc - r.auc_pairs) <= 1e-9
    assert abs(r.auc_pairs - auc_pairs_naive(s, y)) <= 1e-12


@given(st.integers(0, 2 ** 32 - 1))
def test_auc_invariant_under_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    s = rng.random(40)
    y = np.r_[0, 1, rng.integers(0, 2, 38)]
    assert E.auc_trapezoid(s, y) == pytest.approx(E.auc_trapezoid(np.exp(3 * s) - 7, y), abs=1e-12)


def test_roc_curve_endpoints():
    fpr, tpr, thr = E.roc_curve([0.2, 0.6, 0.6, 0.9], [0, 1, 0, 1])
    assert (fpr[0], tpr[0], fpr[-1], tpr[-1]) == (0.0, 0.0, 1.0, 1.0)
    assert np.all(np.diff(thr) < 0)


def test_binary_report_symmetry():
    rng = np.random.default_rng(0)
    p = rng.random(200)
    y = rng.integers(0, 2, 200)
    rep = E.binary_report(p, y)
    n, a = rep["Normal"], rep["Abnormal"]
    assert n.recall == a.specificity and n.specificity == a.recall
    assert n.precision == a.npv and n.npv == a.precision
    assert n.accuracy == a.accuracy


def _report():
    rng = np.random.default_rng(1)
    y = rng.integers(0, 2, (50, 8))
    s = np.clip(y * 0.4 + rng.random((50, 8)) * 0.6, 0, 1)
    return E.evaluate(s, y, [f"class{i}" for i in range(8)])


def test_render_text_rows_and_average_last():
    lines = E.render_report(_report(), "text").decode().splitlines()
    body = [ln for ln in lines if ln.startswith("class") or ln.startswith("Average")]
    assert len(body) == 9 and body[-1].startswith("Average")
    assert "P" in lines[1] and lines[1].index("R ") < lines[1].index("F1-score") < lines[1].index("AUC")


def test_render_csv_roundtrip():
    rep = _report()
    rows = E.parse_report_csv(E.render_report(rep, "csv"))
    assert len(rows) == 9 and rows[-1]["class"] == "Average"
    for parsed, row in zip(rows, rep.rows):
        for k in E.METRICS:
            assert parsed[k] == getattr(row, k)


def test_render_json_schema():
    doc = json.loads(E.render_report(_report(), "json"))
    assert doc["schema_version"] == E.REPORT_SCHEMA and len(doc["rows"]) == 9


def test_rendered_f1_consistent_with_row():
    for row in _report().table()[:-1]:
        assert row["f1"] == pytest.approx(E.f1(row["precision"], row["recall"]), abs=1e-15)


def test_empty_report_rejected():
    with pytest.raises(ValueError):
        E.EvalReport([], 0.5)


def test_threshold_sweep_consistency():
    rng = np.random.default_rng(2)
    s = rng.random((40, 3))
    y = rng.integers(0, 2, (40, 3))
    y[0] = 1
    names = ["a", "b", "c"]
    sweep = E.threshold_sweep(s, y, [0.0, 0.5, 1.0 + 1e-9], names)
    assert [r.counts for r in sweep[1][1].rows] == E.confusion(s, y, 0.5)
    assert all(r.recall == 1.0 for r in sweep[0][1].rows)
    assert all(r.counts.tp + r.counts.fp == 0 for r in sweep[2][1].rows)


@given(arrays(np.float64, 30, elements=st.floats(0, 1)), st.integers(0, 2 ** 16))
def test_predicted_positives_monotone_in_threshold(scores, seed):
    y = np.random.default_rng(seed).integers(0, 2, 30)
    grid = np.linspace(0, 1, 21)
    pp = [E.confusion(scores, y, t)[0] for t in grid]
    totals = [c.tp + c.fp for c in pp]
    assert all(a >= b for a, b in zip(totals, totals[1:]))
    assert all(c.total == 30 for c in pp)
