"""Classification metrics: confusion matrix, precision/recall/F1, ROC and AUC."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ShapeError


def confusion_matrix(y_true, y_pred, k: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    conf = np.zeros((k, k), dtype=np.int64)
    np.add.at(conf, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return conf


@dataclass
class ClassMetrics:
    precision: list[float]
    recall: list[float]
    f1: list[float]
    accuracy: float
    flags: list[str] = field(default_factory=list)

    @property
    def macro_precision(self) -> float:
        return float(np.mean(self.precision))

    @property
    def macro_recall(self) -> float:
        return float(np.mean(self.recall))

    @property
    def macro_f1(self) -> float:
        return float(np.mean(self.f1))


def metrics_from_confusion(conf: np.ndarray, class_names=None) -> ClassMetrics:
    """Per-class rates; a zero denominator yields 0 and adds a warning flag."""
    conf = np.asarray(conf, dtype=np.int64)
    k = conf.shape[0]
    names = list(class_names) if class_names is not None else [str(i) for i in range(k)]
    tp = np.diag(conf)
    predicted = conf.sum(axis=0)
    actual = conf.sum(axis=1)
    precision, recall, f1, flags = [], [], [], []
    for c in range(k):
        if predicted[c] == 0:
            p = 0.0
            flags.append(f"precision undefined for class {names[c]} (never predicted); reported as 0")
        else:
            p = tp[c] / predicted[c]
        if actual[c] == 0:
            r = 0.0
            flags.append(f"recall undefined for class {names[c]} (no samples); reported as 0")
        else:
            r = tp[c] / actual[c]
        precision.append(float(p))
        recall.append(float(r))
        f1.append(float(2 * p * r / (p + r)) if p + r > 0 else 0.0)
    total = conf.sum()
    accuracy = float(np.trace(conf) / total) if total else 0.0
    return ClassMetrics(precision, recall, f1, accuracy, flags)


@dataclass
class RocCurve:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float  # nan when only one class is present
    defined: bool = True


def roc_one_vs_rest(scores, positive) -> RocCurve:
    """ROC for one binary problem with a threshold at every distinct score.

    The first point is ``(inf, 0, 0)``.  Tied scores share one threshold,
    which makes the trapezoidal area equal the rank statistic with ties
    counted as one half.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    order = np.argsort(-scores, kind="stable")
    s, pos = scores[order], positive[order]
    last_of_run = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.r_[0, np.cumsum(pos)[last_of_run]]
    fp = np.r_[0, np.cumsum(~pos)[last_of_run]]
    thresholds = np.r_[np.inf, s[last_of_run]]
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        with np.errstate(invalid="ignore", divide="ignore"):
            fpr = fp / n_neg if n_neg else np.zeros_like(fp, dtype=np.float64)
            tpr = tp / n_pos if n_pos else np.zeros_like(tp, dtype=np.float64)
        return RocCurve(thresholds, fpr, tpr, math.nan, defined=False)
    # integer trapezoid sum, one division at the end
    twice_area = int(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])))
    auc = twice_area / (2 * n_pos * n_neg)
    return RocCurve(thresholds, fp / n_neg, tp / n_pos, auc)


def roc_auc(scores, labels) -> list[RocCurve]:
    """One-vs-rest ROC curves; ``labels`` are class indices or one-hot rows."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels.argmax(axis=1)
    if scores.ndim != 2 or scores.shape[0] != labels.shape[0]:
        raise ShapeError(f"scores {scores.shape} do not match {labels.shape[0]} labels")
    return [roc_one_vs_rest(scores[:, c], labels == c) for c in range(scores.shape[1])]


@dataclass
class EvalReport:
    classes: list[str]
    confusion: np.ndarray
    metrics: ClassMetrics
    roc: list[RocCurve]

    @property
    def accuracy(self) -> float:
        return self.metrics.accuracy

    @property
    def auc(self) -> list[float]:
        return [r.auc for r in self.roc]

    @property
    def flags(self) -> list[str]:
        flags = list(self.metrics.flags)
        for name, r in zip(self.classes, self.roc):
            if not r.defined:
                flags.append(f"AUC undefined for class {name} (single-class labels)")
        return flags

    def write_csv(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "confusion.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["true\\pred"] + self.classes)
            for name, row in zip(self.classes, self.confusion):
                w.writerow([name] + [int(v) for v in row])
        m = self.metrics
        with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
            for flag in self.flags:
                fh.write(f"# warning: {flag}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class", "precision", "recall", "f1"])
            for i, name in enumerate(self.classes):
                w.writerow([name, _fmt(m.precision[i]), _fmt(m.recall[i]), _fmt(m.f1[i])])
            w.writerow(["macro", _fmt(m.macro_precision), _fmt(m.macro_recall), _fmt(m.macro_f1)])
            # micro-averaged precision, recall and F1 all equal accuracy for single-label data
            w.writerow(["accuracy", _fmt(m.accuracy), _fmt(m.accuracy), _fmt(m.accuracy)])
        for name, r in zip(self.classes, self.roc):
            with open(out / f"roc_{name}.csv", "w", newline="", encoding="utf-8") as fh:
                fh.write(f"# auc={_fmt(r.auc)}\n")
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["threshold", "fpr", "tpr"])
                for t, x, y in zip(r.thresholds, r.fpr, r.tpr):
                    w.writerow([_fmt(t), _fmt(x), _fmt(y)])


def _fmt(v: float) -> str:
    return repr(float(v))


def build_report(y_true, probs, classes: list[str]) -> EvalReport:
    probs = np.asarray(probs, dtype=np.float64)
    y_true = np.asarray(y_true)
    if y_true.ndim == 2:
        y_true = y_true.argmax(axis=1)
    k = len(classes)
    conf = confusion_matrix(y_true, probs.argmax(axis=1), k)
    return EvalReport(list(classes), conf, metrics_from_confusion(conf, classes), roc_auc(probs, y_true))
