"""Confusion-matrix evaluation: per-class IoU, mIoU, head/tail group means, sparsity."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import DataError, StructuralError
from .tail import ClassTaxonomy
from .voxel_core import DenseLabelGrid, GridDims, SelectionResult


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts with rows = ground truth, cols = prediction."""

    counts: np.ndarray
    include_empty: bool = False

    @property
    def num_classes(self) -> int:
        return int(self.counts.shape[0])

    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.counts.shape != other.counts.shape or self.include_empty != other.include_empty:
            raise StructuralError("cannot merge confusion matrices of different shape or policy")
        return ConfusionMatrix(self.counts + other.counts, self.include_empty)


def confusion(pred: DenseLabelGrid, gt: DenseLabelGrid, include_empty: bool = False,
              num_classes: int | None = None) -> ConfusionMatrix:
    if pred.dims != gt.dims:
        raise StructuralError(f"prediction dims {pred.dims} != ground truth dims {gt.dims}")
    C = num_classes or max(pred.num_classes, gt.num_classes)
    mask = slice(None) if include_empty else gt.labels != 0
    g, p = gt.labels[mask], pred.labels[mask]
    counts = np.bincount(g * C + p, minlength=C * C).reshape(C, C)
    return ConfusionMatrix(counts.astype(np.int64), include_empty)


def class_iou(cm: ConfusionMatrix) -> dict[int, Fraction]:
    """Exact IoU for every class present in ground truth or prediction."""
    c = cm.counts
    tp = np.diag(c)
    fp = c.sum(axis=0) - tp
    fn = c.sum(axis=1) - tp
    first = 0 if cm.include_empty else 1
    out = {}
    for k in range(first, cm.num_classes):
        denom = int(tp[k] + fp[k] + fn[k])
        if denom:
            out[k] = Fraction(int(tp[k]), denom)
    return out


def _mean(values) -> float | None:
    values = list(values)
    return float(sum(values, Fraction(0)) / len(values)) if values else None


@dataclass
class MetricsReport:
    per_class_iou: dict[int, float]
    miou: float
    head_miou: float | None
    tail_miou: float | None
    class_names: dict[int, str] = field(default_factory=dict)
    groups: dict[int, str] = field(default_factory=dict)
    nonempty_fraction: float | None = None
    selected_fraction: float | None = None
    unique_selected: int | None = None
    wall_times: dict[str, float] = field(default_factory=dict)


def iou_report(cm: ConfusionMatrix, tax: ClassTaxonomy) -> MetricsReport:
    ious = class_iou(cm)
    if not ious:
        raise DataError("no class present in ground truth or prediction; mIoU undefined")
    groups = {k: ("tail" if k in tax.tail_set else "head" if k in tax.head_set else "empty") for k in ious}
    names = {k: (tax.names[k] if k < len(tax.names) else f"class_{k}") for k in ious}
    return MetricsReport(
        per_class_iou={k: float(v) for k, v in ious.items()},
        miou=_mean(ious.values()),
        head_miou=_mean(v for k, v in ious.items() if groups[k] == "head"),
        tail_miou=_mean(v for k, v in ious.items() if groups[k] == "tail"),
        class_names=names,
        groups=groups,
    )


def sparsity_stats(selection: SelectionResult, total_S: int, nonempty_N: int,
                   dims: GridDims | None = None) -> dict[str, float]:
    """Unique selected voxels relative to the key count and the non-empty count."""
    if total_S <= 0:
        raise ValueError("total_S must be positive")
    if len(selection) == 0:
        return {"unique_selected": 0, "fraction_of_S": 0.0, "fraction_of_nonempty": 0.0, "multiplicity_sum": 0}
    if dims is not None:
        unique = selection.unique_count(dims)
    else:
        unique = len({tuple(int(v) for v in c) for c in selection.coords})
    if unique > total_S or (nonempty_N > 0 and unique > nonempty_N):
        raise ValueError("selection larger than the voxel counts it is measured against")
    return {
        "unique_selected": unique,
        "fraction_of_S": unique / total_S,
        "fraction_of_nonempty": unique / nonempty_N if nonempty_N > 0 else 0.0,
        "multiplicity_sum": int(selection.multiplicity.sum()),
    }
