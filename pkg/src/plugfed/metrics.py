"""Confusion-matrix based evaluation.

Rows of a confusion matrix are true classes, columns predicted classes.
Precision, recall or F1 of a class with a zero denominator is reported as 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from plugfed.dataset import Dataset, _atomic_write_text
from plugfed.model import ModelParams, predict_batch


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray

    def __post_init__(self):
        c = np.array(self.counts, dtype=np.int64)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError("confusion matrix must be square")
        if np.any(c < 0):
            raise ValueError("confusion counts must be non-negative")
        c.flags.writeable = False
        object.__setattr__(self, "counts", c)

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


def confusion(y_true: Sequence[int], y_pred: Sequence[int], num_classes: int) -> ConfusionMatrix:
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return ConfusionMatrix(counts)


def evaluate(params: ModelParams, test: Dataset) -> ConfusionMatrix:
    if len(test) == 0:
        raise ValueError("empty test set")
    if test.instance_length != params.input_len or test.num_classes != params.num_classes:
        raise ValueError("test set shape does not match the model")
    return confusion(test.labels, predict_batch(params, test.features), test.num_classes)


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def precision_recall_f1(cm: ConfusionMatrix, c: int) -> tuple[float, float, float]:
    tp = float(cm.counts[c, c])
    p = _ratio(tp, float(cm.counts[:, c].sum()))
    r = _ratio(tp, float(cm.counts[c, :].sum()))
    return p, r, _ratio(2 * p * r, p + r)


def macro_prf(cm: ConfusionMatrix) -> tuple[float, float, float]:
    """Unweighted mean of per-class precision, recall and F1."""
    rows = np.array([precision_recall_f1(cm, c) for c in range(cm.num_classes)])
    return tuple(float(v) for v in rows.mean(axis=0))


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    return float(np.trace(cm.counts)) / cm.total


def metrics_rows(cm: ConfusionMatrix, class_names: Sequence[str]) -> list[tuple[str, float, float, float]]:
    rows = [(name, *precision_recall_f1(cm, c)) for c, name in enumerate(class_names)]
    rows.append(("__macro__", *macro_prf(cm)))
    acc = accuracy(cm)
    rows.append(("__accuracy__", acc, acc, acc))
    return rows


def write_metrics_csv(cm: ConfusionMatrix, class_names: Sequence[str], path: str | Path) -> None:
    lines = ["class,precision,recall,f1"]
    for name, p, r, f in metrics_rows(cm, class_names):
        lines.append(f"{name},{p:.6f},{r:.6f},{f:.6f}")
    _atomic_write_text(Path(path), "\n".join(lines) + "\n")
