"""Dice overlap, tissue fractions and confusion matrices over label maps."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import LabelMap

__all__ = [
    "DiceScore",
    "TissueFractions",
    "dice",
    "dice_masks",
    "dice_from_confusion",
    "tissue_fractions",
    "confusion_matrix",
]


@dataclass(frozen=True)
class DiceScore:
    value: float
    class_index: int
    size_pred: int
    size_truth: int
    intersection: int

    @property
    def vacuous(self) -> bool:
        """Both masks empty; ``value`` is 1 by convention."""
        return self.size_pred + self.size_truth == 0

    def to_json(self) -> dict:
        return {
            "class_index": self.class_index,
            "value": self.value,
            "counts": {
                "predicted": self.size_pred,
                "truth": self.size_truth,
                "intersection": self.intersection,
            },
            "vacuous": self.vacuous,
        }


def dice_masks(a: np.ndarray, b: np.ndarray, class_index: int = -1) -> DiceScore:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    na, nb = int(a.sum()), int(b.sum())
    inter = int(np.count_nonzero(a & b))
    value = 1.0 if na + nb == 0 else 2.0 * inter / (na + nb)
    return DiceScore(value, class_index, na, nb, inter)


def _check_pair(predicted: LabelMap, truth: LabelMap) -> None:
    if predicted.dims != truth.dims:
        raise ValueError(f"dim mismatch: predicted {predicted.dims} vs truth {truth.dims}")


def dice(predicted: LabelMap, truth: LabelMap, class_index: int) -> DiceScore:
    _check_pair(predicted, truth)
    return dice_masks(predicted.mask(class_index), truth.mask(class_index), class_index)


def confusion_matrix(predicted: LabelMap, truth: LabelMap, n_classes: int | None = None) -> np.ndarray:
    """Counts with truth along rows and prediction along columns."""
    _check_pair(predicted, truth)
    k = n_classes or max(predicted.n_classes, truth.n_classes)
    pairs = truth.labels.ravel().astype(np.int64) * k + predicted.labels.ravel()
    return np.bincount(pairs, minlength=k * k).reshape(k, k)


def dice_from_confusion(cm: np.ndarray, class_index: int) -> float:
    tp = cm[class_index, class_index]
    size_truth = cm[class_index].sum()
    size_pred = cm[:, class_index].sum()
    if size_truth + size_pred == 0:
        return 1.0
    return float(2.0 * tp / (size_truth + size_pred))


@dataclass(frozen=True)
class TissueFractions:
    """Per-class fractions of non-background voxels; background is reported against all voxels."""

    legend: tuple[str, ...]
    fractions: tuple[float, ...]
    counts: tuple[int, ...]
    background_fraction: float
    background_index: int = 0
    denominator: str = "non-background voxels"

    def to_json(self) -> dict:
        return {
            "denominator": self.denominator,
            "fractions": {
                name: f for i, (name, f) in enumerate(zip(self.legend, self.fractions))
                if i != self.background_index
            },
            "counts": dict(zip(self.legend, self.counts)),
            "background_fraction_of_total": self.background_fraction,
        }


def tissue_fractions(segmap: LabelMap, background_index: int = 0) -> TissueFractions:
    counts = np.bincount(segmap.labels.ravel(), minlength=segmap.n_classes)
    total = int(counts.sum())
    tissue = total - int(counts[background_index])
    if tissue == 0:
        raise ValueError("label map has no non-background voxels")
    fractions = [
        0.0 if i == background_index else counts[i] / tissue for i in range(segmap.n_classes)
    ]
    return TissueFractions(
        legend=segmap.legend,
        fractions=tuple(float(f) for f in fractions),
        counts=tuple(int(c) for c in counts),
        background_fraction=float(counts[background_index] / total),
        background_index=background_index,
    )
