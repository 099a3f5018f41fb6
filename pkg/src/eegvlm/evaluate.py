"""Per-class split, confusion matrix and clinical agreement metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence, TypeVar

import numpy as np

from .errors import DegenerateKappa, EmptyMatrix, InsufficientClass, LengthMismatch, UnknownLabel
from .stages import CLASS_ORDER, Stage

T = TypeVar("T")


def split_dataset(
    records: Sequence[T],
    label_of: Callable[[T], Stage],
    test_per_class: int = 75,
    seed: int = 0,
) -> tuple[list[T], list[T]]:
    """Hold out ``test_per_class`` records of every class, uniformly without replacement.

    Returns ``(train, test)``; both keep the input order.
    """
    rng = np.random.default_rng(seed)
    test_idx: set[int] = set()
    for stage in CLASS_ORDER:
        members = [i for i, r in enumerate(records) if Stage.parse(label_of(r)) == stage]
        if len(members) < test_per_class:
            raise InsufficientClass(f"{stage}: {len(members)} records, need {test_per_class} for testing")
        test_idx.update(members[j] for j in rng.choice(len(members), test_per_class, replace=False))
    train = [r for i, r in enumerate(records) if i not in test_idx]
    test = [r for i, r in enumerate(records) if i in test_idx]
    return train, test


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """Rows are true stages, columns predicted stages, both in ``CLASS_ORDER``."""

    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __eq__(self, other) -> bool:
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)


def _index(label) -> int:
    try:
        return Stage.parse(label).index
    except ValueError:
        raise UnknownLabel(f"unknown label {label!r}") from None


def confusion(true_labels: Sequence, predicted_labels: Sequence, n_classes: int = len(CLASS_ORDER)) -> ConfusionMatrix:
    if len(true_labels) != len(predicted_labels):
        raise LengthMismatch(f"{len(true_labels)} true labels vs {len(predicted_labels)} predictions")
    t = np.array([_index(x) for x in true_labels], dtype=np.int64)
    p = np.array([_index(x) for x in predicted_labels], dtype=np.int64)
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return ConfusionMatrix(counts)


@dataclass(frozen=True)
class MetricsBundle:
    accuracy: float
    per_class_f1: tuple[float, ...]
    macro_f1: float
    kappa: float

    def as_dict(self, class_names: Sequence[str] | None = None) -> dict[str, float]:
        names = class_names or [s.value for s in CLASS_ORDER]
        d = {"accuracy": self.accuracy, "mf1": self.macro_f1, "kappa": self.kappa}
        d.update({f"f1.{n.lower()}": f for n, f in zip(names, self.per_class_f1)})
        return d


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    return np.divide(num, den, out=np.zeros_like(num, dtype=np.float64), where=den != 0)


def metrics(cm: ConfusionMatrix | np.ndarray) -> MetricsBundle:
    """Accuracy, per-class F1 (0/0 -> 0), macro F1 and Cohen's kappa."""
    c = np.asarray(cm.counts if isinstance(cm, ConfusionMatrix) else cm, dtype=np.float64)
    total = c.sum()
    if total <= 0:
        raise EmptyMatrix("confusion matrix has no counts")
    tp = np.diag(c)
    row, col = c.sum(axis=1), c.sum(axis=0)
    precision = _safe_div(tp, col)
    recall = _safe_div(tp, row)
    f1 = _safe_div(2 * precision * recall, precision + recall)
    # kappa = (p_o - p_e) / (1 - p_e), scaled by total**2 so integer counts stay exact
    agree = tp.sum() * total
    chance = (row * col).sum()
    if chance == total**2:
        raise DegenerateKappa("chance agreement is 1; kappa undefined")
    kappa = (agree - chance) / (total**2 - chance)
    return MetricsBundle(float(tp.sum() / total), tuple(float(x) for x in f1), float(f1.mean()), float(kappa))
