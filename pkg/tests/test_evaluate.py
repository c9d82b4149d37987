from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowpix.evaluate import (ConfusionMatrix, EvaluationError, binary_collapse, confusion_matrix,
                              evaluation_document, export_comparison, parse_comparison_csv, per_class_metrics)

REFERENCE = [[19119, 870, 30], [419, 16647, 27], [10, 2, 6630]]

matrices = st.lists(st.integers(0, 500), min_size=9, max_size=9).filter(lambda v: sum(v) > 0).map(
    lambda v: ConfusionMatrix(np.array(v).reshape(3, 3)))


def test_reference_matrix_headline_figures():
    m = ConfusionMatrix(REFERENCE)
    rep = per_class_metrics(m)
    assert m.total == 43754
    assert rep.accuracy == pytest.approx(42396 / 43754, abs=1e-12)
    assert abs(rep.accuracy - 0.9690) <= 5e-4
    ddos = rep.per_class["DDoS"]
    assert abs(ddos.precision - 0.978) <= 1e-3 and abs(ddos.recall - 0.955) <= 1e-3
    assert ddos.precision == 19119 / 19548 and ddos.recall == 19119 / 20019
    binary = binary_collapse(m)
    assert binary.accuracy == pytest.approx((19119 + 870 + 419 + 16647 + 6630) / 43754, abs=1e-12)
    assert abs(binary.accuracy - 0.9984) <= 5e-4 and binary.f1 >= 0.998


def test_reference_matrix_two_decimal_figures():
    rep = per_class_metrics(ConfusionMatrix(REFERENCE))
    table = {"DDoS": (0.98, 0.96, 0.97), "DoS": (0.95, 0.97, 0.96), "Others": (0.99, 1.0, 0.99)}
    for name, (p, r, f1) in table.items():
        got = rep.per_class[name]
        assert abs(got.precision - p) <= 0.005 and abs(got.recall - r) <= 0.005 and abs(got.f1 - f1) <= 0.005


def test_one_vs_rest_accuracy_definition():
    m = np.array(REFERENCE)
    rep = per_class_metrics(ConfusionMatrix(m))
    for c, name in enumerate(("DDoS", "DoS", "Others")):
        tp = m[c, c]
        tn = sum(m[i, j] for i in range(3) for j in range(3) if i != c and j != c)
        assert rep.per_class[name].accuracy == pytest.approx((tp + tn) / m.sum(), abs=1e-15)


def test_confusion_matrix_matches_brute_force_tally():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n = int(rng.integers(1, 300))
        pred, act = rng.integers(0, 3, n), rng.integers(0, 3, n)
        expected = [[sum(1 for p, a in zip(pred, act) if a == i and p == j) for j in range(3)] for i in range(3)]
        cm = confusion_matrix(pred, act)
        assert cm.to_list() == expected and cm.total == n


def test_perfect_predictions_give_diagonal():
    labels = [0, 1, 2, 2, 1]
    assert confusion_matrix(labels, labels).to_list() == [[1, 0, 0], [0, 2, 0], [0, 0, 2]]


@pytest.mark.parametrize("pred,act", [([0, 1], [0]), ([], [])])
def test_confusion_matrix_rejects_bad_input(pred, act):
    with pytest.raises(EvaluationError):
        confusion_matrix(pred, act)


@pytest.mark.parametrize("counts", [np.zeros((2, 2)), [[-1, 0, 0], [0, 1, 0], [0, 0, 1]]])
def test_confusion_matrix_invariants(counts):
    with pytest.raises(EvaluationError):
        ConfusionMatrix(counts)


def test_identity_matrix_is_perfect():
    rep = per_class_metrics(ConfusionMatrix(np.eye(3, dtype=int) * 7))
    for m in rep.per_class.values():
        assert (m.precision, m.recall, m.f1, m.accuracy) == (1.0, 1.0, 1.0, 1.0)
    assert rep.accuracy == rep.weighted_f1 == 1.0
    assert binary_collapse(ConfusionMatrix(np.eye(3, dtype=int))).accuracy == 1.0


def test_empty_predicted_column_gives_zero_precision():
    rep = per_class_metrics(ConfusionMatrix([[0, 5, 0], [0, 5, 0], [0, 0, 5]]))
    assert rep.per_class["DDoS"].precision == 0.0 and rep.per_class["DDoS"].f1 == 0.0


def test_empty_matrix_is_rejected():
    with pytest.raises(EvaluationError):
        per_class_metrics(ConfusionMatrix(np.zeros((3, 3), dtype=int)))


def test_cross_attack_confusion_is_forgiven():
    m = ConfusionMatrix([[0, 10, 0], [7, 0, 0], [0, 0, 4]])
    assert per_class_metrics(m).accuracy == 4 / 21
    assert binary_collapse(m).accuracy == 1.0 and binary_collapse(m).f1 == 1.0


def test_weighted_f1_is_support_weighted():
    m = np.array(REFERENCE)
    rep = per_class_metrics(ConfusionMatrix(m))
    f1 = [rep.per_class[n].f1 for n in ("DDoS", "DoS", "Others")]
    assert rep.weighted_f1 == pytest.approx(np.dot(f1, m.sum(axis=1)) / m.sum(), abs=1e-15)


@settings(max_examples=60, deadline=None, derandomize=True)
@given(m=matrices)
def test_metric_bounds_and_collapse_dominance(m):
    rep = per_class_metrics(m)
    values = [rep.accuracy, rep.weighted_f1] + [v for c in rep.per_class.values()
                                                 for v in (c.precision, c.recall, c.f1, c.accuracy)]
    assert all(0 <= v <= 1 for v in values)
    b = binary_collapse(m)
    assert all(0 <= v <= 1 for v in (b.accuracy, b.f1, b.precision, b.recall))
    assert b.accuracy >= rep.accuracy - 1e-15
    assert sum(map(sum, b.counts)) == m.total


@settings(max_examples=40, deadline=None, derandomize=True)
@given(m=matrices, perm=st.permutations([0, 1, 2]))
def test_permutation_consistency(m, perm):
    names = ("DDoS", "DoS", "Others")
    p = np.array(perm)
    permuted = ConfusionMatrix(m.counts[np.ix_(p, p)])
    a, b = per_class_metrics(m), per_class_metrics(permuted)
    for new, old in enumerate(perm):
        x, y = a.per_class[names[old]], b.per_class[names[new]]
        assert (x.precision, x.recall, x.f1, x.accuracy, x.support) == \
            pytest.approx((y.precision, y.recall, y.f1, y.accuracy, y.support), abs=1e-15)
    assert a.accuracy == pytest.approx(b.accuracy, abs=1e-15)


def test_confusion_csv_round_trip_and_header_check():
    m = ConfusionMatrix(REFERENCE)
    text = m.to_csv()
    assert text.splitlines()[0] == "DDoS,DoS,Others" and len(text.splitlines()) == 4
    assert ConfusionMatrix.from_csv(text).to_list() == REFERENCE
    with pytest.raises(EvaluationError):
        ConfusionMatrix.from_csv("a,b,c\n1,2,3\n")


def test_evaluation_document_is_json_serialisable():
    doc = json.loads(json.dumps(evaluation_document(ConfusionMatrix(REFERENCE))))
    assert doc["confusion_matrix"] == REFERENCE
    assert doc["binary"]["counts"] == [[37055, 57], [12, 6630]]
    assert set(doc["metrics"]["per_class"]) == {"DDoS", "DoS", "Others"}


def test_export_comparison_verbatim_and_parse_back():
    entries = [{"method": "ours", "multiclass_accuracy": 0.9696, "binary_accuracy": 0.9984},
               {"method": "baseline", "multiclass_accuracy": 1 / 3, "binary_accuracy": None}]
    text = export_comparison(entries)
    lines = text.splitlines()
    assert lines[0] == "method,multiclass_accuracy,binary_accuracy"
    assert lines[1] == "ours,0.9696,0.9984" and lines[2].endswith(",")
    assert parse_comparison_csv(text) == entries
    assert json.loads(export_comparison(entries, "json")) == entries


def test_export_single_entry():
    text = export_comparison([{"method": "m", "multiclass_accuracy": 0.5, "binary_accuracy": 0.75}])
    assert len(text.splitlines()) == 2


def test_export_rejects_duplicates_empty_and_unknown_format():
    row = {"method": "m", "multiclass_accuracy": 0.5, "binary_accuracy": 0.5}
    with pytest.raises(EvaluationError, match="duplicate"):
        export_comparison([row, row])
    with pytest.raises(EvaluationError):
        export_comparison([])
    with pytest.raises(EvaluationError):
        export_comparison([row], "xml")
