"""Confusion counts, threshold metrics, ROC/AUC and report rendering."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

REPORT_SCHEMA = 1


class UndefinedAUC(ValueError):
    pass


class Rate(float):
    """A float metric that remembers whether its denominator was zero."""

    degenerate: bool

    def __new__(cls, num: float, den: float):
        obj = super().__new__(cls, num / den if den else 0.0)
        obj.degenerate = not den
        return obj


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def mirrored(self) -> "ConfusionCounts":
        """Counts for the complementary class of a binary problem."""
        return ConfusionCounts(self.tn, self.fn, self.fp, self.tp)


def _as_2d(scores, labels):
    scores, labels = np.asarray(scores, dtype=np.float64), np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} differ in shape")
    if scores.ndim == 1:
        scores, labels = scores[:, None], labels[:, None]
    return scores, labels.astype(bool)


def confusion(scores, labels, threshold: float = 0.5) -> list[ConfusionCounts]:
    """Per-class counts; a score equal to the threshold is a positive prediction."""
    scores, labels = _as_2d(scores, labels)
    pred = scores >= threshold
    out = []
    for c in range(scores.shape[1]):
        p, y = pred[:, c], labels[:, c]
        out.append(ConfusionCounts(int(np.sum(p & y)), int(np.sum(p & ~y)),
                                   int(np.sum(~p & y)), int(np.sum(~p & ~y))))
    return out


def precision(c: ConfusionCounts) -> Rate:
    return Rate(c.tp, c.tp + c.fp)


def recall(c: ConfusionCounts) -> Rate:
    return Rate(c.tp, c.tp + c.fn)


sensitivity = recall
ppv = precision


def specificity(c: ConfusionCounts) -> Rate:
    return Rate(c.tn, c.tn + c.fp)


def npv(c: ConfusionCounts) -> Rate:
    return Rate(c.tn, c.tn + c.fn)


def accuracy(c: ConfusionCounts) -> Rate:
    return Rate(c.tp + c.tn, c.total)


def f1(p: float, r: float) -> float:
    return 2.0 * p * r / (p + r) if p + r > 0 else 0.0


# ---------------------------------------------------------------------------
# ROC


@dataclass
class RocResult:
    auc: float
    auc_pairs: float
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray


def _binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        raise UndefinedAUC("AUC needs at least one positive and one negative sample")
    return scores, labels


def roc_curve(scores, labels):
    """(fpr, tpr, thresholds) over every distinct score, highest threshold first."""
    scores, labels = _binary(scores, labels)
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    tpr = np.r_[0.0, tp / tp[-1]]
    fpr = np.r_[0.0, fp / fp[-1]]
    return fpr, tpr, np.r_[np.inf, s[last]]


def auc_trapezoid(scores, labels) -> float:
    fpr, tpr, _ = roc_curve(scores, labels)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def auc_mann_whitney(scores, labels) -> float:
    """Fraction of (positive, negative) pairs ranked correctly; ties count one half."""
    scores, labels = _binary(scores, labels)
    neg = np.sort(scores[~labels])
    pos = scores[labels]
    below = np.searchsorted(neg, pos, side="left")
    tied = np.searchsorted(neg, pos, side="right") - below
    wins = below.sum(dtype=np.int64) * 2 + tied.sum(dtype=np.int64)
    return float(wins / (2.0 * pos.size * neg.size))


def roc_auc(scores, labels) -> RocResult:
    fpr, tpr, thr = roc_curve(scores, labels)
    area = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocResult(area, auc_mann_whitney(scores, labels), fpr, tpr, thr)


def macro_auc(scores, labels) -> float:
    """Mean one-vs-rest AUC over the classes where it is defined; NaN if none is."""
    scores, labels = _as_2d(scores, labels)
    vals = []
    for c in range(scores.shape[1]):
        try:
            vals.append(auc_trapezoid(scores[:, c], labels[:, c]))
        except UndefinedAUC:
            pass
    return float(np.mean(vals)) if vals else float("nan")


# ---------------------------------------------------------------------------
# reports

METRICS = ("precision", "recall", "f1", "auc", "specificity", "npv", "accuracy")


@dataclass
class ClassMetrics:
    name: str
    counts: ConfusionCounts
    auc: float | None = None
    precision: float = field(init=False)
    recall: float = field(init=False)
    specificity: float = field(init=False)
    npv: float = field(init=False)
    accuracy: float = field(init=False)
    f1: float = field(init=False)
    degenerate: list[str] = field(init=False)

    def __post_init__(self):
        rates = {"precision": precision(self.counts), "recall": recall(self.counts),
                 "specificity": specificity(self.counts), "npv": npv(self.counts),
                 "accuracy": accuracy(self.counts)}
        for k, v in rates.items():
            setattr(self, k, float(v))
        self.f1 = f1(self.precision, self.recall)
        self.degenerate = [k for k, v in rates.items() if v.degenerate]

    def as_dict(self) -> dict:
        d = {"class": self.name}
        d.update({k: getattr(self, k) for k in METRICS})
        d.update(tp=self.counts.tp, fp=self.counts.fp, fn=self.counts.fn, tn=self.counts.tn)
        return d


@dataclass
class EvalReport:
    rows: list[ClassMetrics]
    threshold: float

    def __post_init__(self):
        if not self.rows:
            raise ValueError("report has no classes")

    def __getitem__(self, name: str) -> ClassMetrics:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def average(self) -> dict:
        """Macro average of every rate; counts are summed; AUC over defined classes."""
        d = {"class": "Average"}
        for k in METRICS:
            vals = [getattr(r, k) for r in self.rows if getattr(r, k) is not None]
            d[k] = float(np.mean(vals)) if vals else None
        for k in ("tp", "fp", "fn", "tn"):
            d[k] = sum(getattr(r.counts, k) for r in self.rows)
        return d

    def table(self) -> list[dict]:
        return [r.as_dict() for r in self.rows] + [self.average()]


def evaluate(scores, labels, class_names, threshold: float = 0.5) -> EvalReport:
    scores, labels = _as_2d(scores, labels)
    if len(class_names) != scores.shape[1]:
        raise ValueError(f"{len(class_names)} class names for {scores.shape[1]} score columns")
    rows = []
    for c, counts in enumerate(confusion(scores, labels, threshold)):
        try:
            auc = auc_trapezoid(scores[:, c], labels[:, c])
        except UndefinedAUC:
            auc = None
        rows.append(ClassMetrics(class_names[c], counts, auc))
    return EvalReport(rows, threshold)


def binary_report(p_positive, is_positive, threshold: float = 0.5,
                  names: tuple[str, str] = ("Normal", "Abnormal")) -> EvalReport:
    """Two-row report of a binary classifier.

    The negative-class row is the mirror image of the positive-class row,
    so its sensitivity is the positive class's specificity and so on.
    """
    (counts,) = confusion(np.asarray(p_positive).ravel(), np.asarray(is_positive).ravel(), threshold)
    try:
        auc = auc_trapezoid(p_positive, is_positive)
    except UndefinedAUC:
        auc = None
    return EvalReport([ClassMetrics(names[0], counts.mirrored(), auc),
                       ClassMetrics(names[1], counts, auc)], threshold)


def _fmt(v) -> str:
    return "-" if v is None else f"{v:.6f}" if isinstance(v, float) else str(v)


def render_report(report: EvalReport, fmt: str = "text") -> bytes:
    table = report.table()
    columns = ["class", *METRICS, "tp", "fp", "fn", "tn"]
    if fmt == "json":
        doc = {"schema_version": REPORT_SCHEMA, "threshold": report.threshold, "rows": table}
        return (json.dumps(doc, indent=2) + "\n").encode()
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(columns)
        for row in table:
            w.writerow(["" if row[c] is None else repr(row[c]) if isinstance(row[c], float) else row[c]
                        for c in columns])
        return buf.getvalue().encode()
    if fmt == "text":
        heads = ["Class", "P", "R", "F1-score", "AUC", "Spec", "NPV", "Acc", "TP", "FP", "FN", "TN"]
        cells = [[_fmt(row[c]) for c in columns] for row in table]
        widths = [max(len(h), *(len(r[i]) for r in cells)) for i, h in enumerate(heads)]
        line = lambda r: "  ".join(v.ljust(w) if i == 0 else v.rjust(w)  # noqa: E731
                                   for i, (v, w) in enumerate(zip(r, widths)))
        out = [f"threshold {report.threshold:g}", line(heads), "-" * len(line(heads))]
        out += [line(r) for r in cells[:-1]] + ["-" * len(line(heads)), line(cells[-1])]
        return ("\n".join(out) + "\n").encode()
    raise ValueError(f"unknown report format {fmt!r}")


def parse_report_csv(data: bytes) -> list[dict]:
    rows = []
    for row in csv.DictReader(io.StringIO(data.decode())):
        rows.append({k: (v if k == "class" else None if v == "" else int(v) if k in "tp fp fn tn".split()
                         else float(v)) for k, v in row.items()})
    return rows


def threshold_sweep(scores, labels, grid, class_names) -> list[tuple[float, EvalReport]]:
    """Reports at each threshold of ``grid``; a threshold above 1 predicts all-negative."""
    return [(float(t), evaluate(scores, labels, class_names, float(t))) for t in grid]


def render_sweep(sweep: list[tuple[float, EvalReport]]) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["threshold", "class", "precision", "recall", "f1", "specificity", "tp", "fp", "fn", "tn"])
    for t, rep in sweep:
        for r in rep.rows:
            c = r.counts
            w.writerow([repr(t), r.name, repr(r.precision), repr(r.recall), repr(r.f1), repr(r.specificity),
                        c.tp, c.fp, c.fn, c.tn])
    return buf.getvalue().encode()
