"""Confusion matrices, per-class metrics and the attack-vs-others collapse."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from flowpix.labels import CLASS_NAMES, NUM_CLASSES, ClassLabel

ATTACK = (ClassLabel.DDOS, ClassLabel.DOS)


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    """``counts[actual][predicted]`` with axes ordered DDoS, DoS, Others."""

    counts: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.counts, dtype=np.int64)
        if arr.shape != (NUM_CLASSES, NUM_CLASSES) or np.any(arr < 0):
            raise EvaluationError(f"confusion matrix must be {NUM_CLASSES}x{NUM_CLASSES} non-negative counts")
        object.__setattr__(self, "counts", arr)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CLASS_NAMES)
        writer.writerows(self.counts.tolist())
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ConfusionMatrix":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0] != list(CLASS_NAMES):
            raise EvaluationError("confusion CSV header must be DDoS,DoS,Others")
        return cls([[int(v) for v in r] for r in rows[1:]])

    def to_list(self) -> list[list[int]]:
        return self.counts.tolist()


def confusion_matrix(predictions: Sequence, actuals: Sequence) -> ConfusionMatrix:
    pred = np.asarray([int(p) for p in predictions], dtype=np.intp)
    act = np.asarray([int(a) for a in actuals], dtype=np.intp)
    if len(pred) != len(act):
        raise EvaluationError(f"{len(pred)} predictions for {len(act)} actual labels")
    if len(pred) == 0:
        raise EvaluationError("no samples to tally")
    counts = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    np.add.at(counts, (act, pred), 1)
    return ConfusionMatrix(counts)


def _ratio(num: float, den: float) -> float:
    return float(num) / float(den) if den else 0.0


def _f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    accuracy: float
    support: int


@dataclass
class MetricsReport:
    per_class: dict[str, ClassMetrics]
    accuracy: float
    weighted_f1: float
    total: int

    def to_dict(self) -> dict:
        return {
            "classes": list(CLASS_NAMES),
            "per_class": {k: asdict(v) for k, v in self.per_class.items()},
            "accuracy": self.accuracy,
            "weighted_f1": self.weighted_f1,
            "weighted_f1_definition": "support-weighted mean of per-class F1",
            "per_class_accuracy_definition": "one-vs-rest (TP + TN) / total",
            "total": self.total,
        }


def per_class_metrics(matrix: ConfusionMatrix) -> MetricsReport:
    m = matrix.counts
    total = m.sum()
    if total == 0:
        raise EvaluationError("metrics need at least one sample")
    per: dict[str, ClassMetrics] = {}
    f1s, supports = [], []
    for c, name in enumerate(CLASS_NAMES):
        tp = m[c, c]
        col, row = m[:, c].sum(), m[c, :].sum()
        p, r = _ratio(tp, col), _ratio(tp, row)
        tn = total - row - col + tp
        per[name] = ClassMetrics(p, r, _f1(p, r), _ratio(tp + tn, total), int(row))
        f1s.append(per[name].f1)
        supports.append(row)
    weighted = float(np.dot(f1s, supports) / total)
    return MetricsReport(per, _ratio(np.trace(m), total), weighted, int(total))


@dataclass
class BinaryCollapseReport:
    accuracy: float
    f1: float
    precision: float
    recall: float
    counts: list[list[int]]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["positive_class"] = "attack (DDoS + DoS)"
        d["axes"] = ["attack", "Others"]
        return d


def binary_collapse(matrix: ConfusionMatrix) -> BinaryCollapseReport:
    """Fold DDoS and DoS into one positive "attack" class."""
    m = matrix.counts
    a = [int(c) for c in ATTACK]
    o = int(ClassLabel.OTHERS)
    tp = m[np.ix_(a, a)].sum()
    fn = m[a, o].sum()
    fp = m[o, a].sum()
    tn = m[o, o]
    total = m.sum()
    p, r = _ratio(tp, tp + fp), _ratio(tp, tp + fn)
    return BinaryCollapseReport(_ratio(tp + tn, total), _f1(p, r), p, r,
                                [[int(tp), int(fn)], [int(fp), int(tn)]])


def evaluation_document(matrix: ConfusionMatrix) -> dict:
    return {
        "format": "flowpix-metrics",
        "version": 1,
        "confusion_matrix": matrix.to_list(),
        "metrics": per_class_metrics(matrix).to_dict(),
        "binary": binary_collapse(matrix).to_dict(),
    }


COMPARISON_COLUMNS = ("method", "multiclass_accuracy", "binary_accuracy")


def export_comparison(entries: Iterable[dict], fmt: str = "csv") -> str:
    """Serialize method-vs-accuracy rows for external plotting.

    Floats are written with ``repr`` so a parse-back reproduces them exactly.
    A missing accuracy is written as an empty cell (CSV) or null (JSON).
    """
    rows = [dict(e) for e in entries]
    if not rows:
        raise EvaluationError("nothing to export")
    names = [r["method"] for r in rows]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise EvaluationError(f"duplicate method name(s): {', '.join(dupes)}")
    clean = [{k: (None if r.get(k) is None else (r[k] if k == "method" else float(r[k])))
              for k in COMPARISON_COLUMNS} for r in rows]
    if fmt == "json":
        return json.dumps(clean, indent=2) + "\n"
    if fmt != "csv":
        raise EvaluationError(f"unknown export format {fmt!r}")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COMPARISON_COLUMNS)
    for r in clean:
        writer.writerow([r["method"]] + ["" if r[k] is None else repr(r[k]) for k in COMPARISON_COLUMNS[1:]])
    return buf.getvalue()


def parse_comparison_csv(text: str) -> list[dict]:
    reader = csv.DictReader(io.StringIO(text))
    return [{"method": r["method"],
             **{k: (float(r[k]) if r[k] != "" else None) for k in COMPARISON_COLUMNS[1:]}}
            for r in reader]
