"""Confusion matrices and classification metrics."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np


@dataclass
class ConfusionMatrix:
    counts: np.ndarray
    class_names: list

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_list(self) -> list:
        return self.counts.astype(int).tolist()


def confusion_matrix(true_labels, predicted_labels, k: int, class_names=None) -> ConfusionMatrix:
    """``counts[i, j]`` is the number of samples of class ``i`` predicted as ``j``."""
    t = np.asarray(true_labels, dtype=np.int64).ravel()
    p = np.asarray(predicted_labels, dtype=np.int64).ravel()
    if t.shape != p.shape:
        raise ValueError(f"label length mismatch: {t.size} true vs {p.size} predicted")
    for name, arr in (("true", t), ("predicted", p)):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise ValueError(f"{name} label outside [0, {k})")
    counts = np.bincount(t * k + p, minlength=k * k).reshape(k, k)
    names = list(class_names) if class_names is not None else [str(i) for i in range(k)]
    return ConfusionMatrix(counts, names)


@dataclass
class MetricsReport:
    accuracy: float
    balanced_accuracy: float
    precision: float
    recall: float
    f1: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    per_class: list
    averaging: str = "weighted"
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def write_per_class_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class", "precision", "recall", "f1", "support"])
            for row in self.per_class:
                w.writerow([row["class"], f"{row['precision']:.6f}", f"{row['recall']:.6f}",
                            f"{row['f1']:.6f}", row["support"]])


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def compute_metrics(cm: ConfusionMatrix) -> MetricsReport:
    """Accuracy, balanced accuracy and weighted/macro precision, recall, F1.

    Classes with no predicted positives get precision 0 (and a warning);
    classes with no support get recall 0 and are left out of the balanced
    accuracy.
    """
    c = np.asarray(cm.counts, dtype=np.int64)
    total = int(c.sum())
    if c.size == 0 or total == 0:
        raise ValueError("confusion matrix is empty")
    tp = np.diag(c).astype(float)
    support = c.sum(axis=1)
    predicted = c.sum(axis=0)
    notes = []
    per_class = []
    for i, name in enumerate(cm.class_names):
        if predicted[i] == 0:
            notes.append(f"class {name!r} has no predicted samples; precision set to 0")
        if support[i] == 0:
            notes.append(f"class {name!r} has no true samples; recall set to 0")
        p = tp[i] / predicted[i] if predicted[i] else 0.0
        r = tp[i] / support[i] if support[i] else 0.0
        per_class.append({"class": name, "precision": float(p), "recall": float(r),
                          "f1": float(_f1(p, r)), "support": int(support[i])})
    prec = np.array([row["precision"] for row in per_class])
    rec = np.array([row["recall"] for row in per_class])
    f1 = np.array([row["f1"] for row in per_class])
    w = support / total
    present = support > 0
    return MetricsReport(
        accuracy=float(tp.sum() / total),
        balanced_accuracy=float(rec[present].mean()),
        precision=float((w * prec).sum()),
        recall=float((w * rec).sum()),
        f1=float((w * f1).sum()),
        macro_precision=float(prec.mean()),
        macro_recall=float(rec.mean()),
        macro_f1=float(f1.mean()),
        per_class=per_class,
        warnings=notes,
    )


def mean_std(scores) -> tuple:
    """Mean and population standard deviation."""
    s = [float(x) for x in scores]
    m = math.fsum(s) / len(s)
    return m, math.sqrt(math.fsum((x - m) ** 2 for x in s) / len(s))


def format_percent_summary(scores, mean_decimals: int = 1, std_decimals: int = 1) -> str:
    """``"84.8% (std 2.6%)"`` for scores given in percent."""
    m, sd = mean_std(scores)
    return f"{m:.{mean_decimals}f}% (std {sd:.{std_decimals}f}%)"
