"""Coarse class prediction and balanced tail voxel selection."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .attention import softmax_rows
from .errors import ConfigError, DataError, StructuralError
from .voxel_core import DenseLabelGrid, SelectionResult

DEFAULT_TAIL_THRESHOLD = 0.01


@dataclass(frozen=True)
class ClassTaxonomy:
    num_classes: int
    names: tuple[str, ...]
    frequencies: np.ndarray  # length C, entry 0 (empty) is always 0
    tail_set: frozenset[int]
    head_set: frozenset[int]

    def __post_init__(self):
        C = self.num_classes
        sem = set(range(1, C))
        tail, head = frozenset(self.tail_set), frozenset(self.head_set)
        if tail & head:
            raise ConfigError(f"classes {sorted(tail & head)} are both head and tail")
        if tail | head != sem:
            raise ConfigError("head and tail sets must partition the semantic classes 1..C-1")
        freq = np.asarray(self.frequencies, dtype=np.float64)
        if freq.shape != (C,) or freq.min() < 0:
            raise ConfigError("frequencies must be C non-negative values")
        if C > 1 and freq[1:].sum() > 0 and abs(freq[1:].sum() - 1.0) > 1e-6:
            raise ConfigError("semantic class frequencies must sum to 1")
        if len(self.names) != C:
            raise ConfigError(f"need {C} class names, got {len(self.names)}")
        object.__setattr__(self, "tail_set", tail)
        object.__setattr__(self, "head_set", head)
        object.__setattr__(self, "frequencies", freq)
        object.__setattr__(self, "names", tuple(self.names))

    def tail_ids(self) -> np.ndarray:
        return np.array(sorted(self.tail_set), dtype=np.int64)

    @classmethod
    def from_counts(cls, counts, tail_threshold: float = DEFAULT_TAIL_THRESHOLD,
                    names: Sequence[str] | None = None) -> "ClassTaxonomy":
        counts = np.asarray(counts, dtype=np.int64)
        if not 0.0 < tail_threshold < 1.0:
            raise ConfigError(f"tail_threshold must be in (0, 1), got {tail_threshold}")
        nonempty = int(counts[1:].sum())
        if nonempty == 0:
            raise DataError("cannot derive a taxonomy from an all-empty grid")
        freq = np.zeros(counts.size)
        freq[1:] = counts[1:] / nonempty
        tail = {c for c in range(1, counts.size) if freq[c] < tail_threshold}
        head = set(range(1, counts.size)) - tail
        if names is None:
            names = ["empty"] + [f"class_{c}" for c in range(1, counts.size)]
        return cls(int(counts.size), tuple(names), freq, frozenset(tail), frozenset(head))


def derive_taxonomy(grid: DenseLabelGrid | Iterable[DenseLabelGrid],
                    tail_threshold: float = DEFAULT_TAIL_THRESHOLD,
                    names: Sequence[str] | None = None) -> ClassTaxonomy:
    """Split semantic classes into head and tail by non-empty frequency.

    Accepts one grid or several; several are pooled into one histogram.
    """
    grids = [grid] if isinstance(grid, DenseLabelGrid) else list(grid)
    if not grids:
        raise DataError("no label grids given")
    C = max(g.num_classes for g in grids)
    counts = np.zeros(C, dtype=np.int64)
    for g in grids:
        counts += np.bincount(g.labels, minlength=C)[:C]
    return ClassTaxonomy.from_counts(counts, tail_threshold, names)


@dataclass(frozen=True)
class CoarsePrediction:
    probs: np.ndarray
    coords: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        c = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        if p.ndim != 2 or p.shape[0] != c.shape[0]:
            raise StructuralError(f"probs {p.shape} and coords {c.shape} disagree")
        if p.size and np.abs(p.sum(axis=1) - 1.0).max() > 1e-6:
            raise StructuralError("coarse prediction rows must sum to 1")
        object.__setattr__(self, "probs", p)
        object.__setattr__(self, "coords", c)

    def __len__(self) -> int:
        return int(self.probs.shape[0])


def _affine(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[0] or b.shape != (W.shape[1],):
        raise StructuralError(f"affine shape mismatch: x{x.shape} W{W.shape} b{b.shape}")
    return x @ W + b


def coarse_predict(features: np.ndarray, head_params: Mapping[str, np.ndarray],
                   coords=None) -> CoarsePrediction:
    """Single linear layer plus softmax over the class axis."""
    logits = _affine(features, head_params["W"], head_params["b"])
    if coords is None:
        coords = np.zeros((logits.shape[0], 3), dtype=np.int64)
    return CoarsePrediction(softmax_rows(logits) if logits.shape[0] else logits, coords)


def tail_score(pred: CoarsePrediction, tax: ClassTaxonomy) -> np.ndarray:
    if not tax.tail_set:
        raise ConfigError("tail_set is empty; no tail score defined")
    return pred.probs[:, tax.tail_ids()].max(axis=1)


def _rank(scores: np.ndarray, coords: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """``idx`` reordered by score descending, ties broken by (z, y, x) ascending."""
    if idx.size == 0:
        return idx
    c = coords[idx]
    order = np.lexsort((c[:, 0], c[:, 1], c[:, 2], -scores[idx]))
    return idx[order]


def select_tail(pred: CoarsePrediction, tax: ClassTaxonomy, budget: int,
                exclude: Iterable | None = None) -> SelectionResult:
    """Fill a budget of ``budget`` tail samples with top-1 / top-2 / repetition.

    Stage 1 takes voxels whose most probable class is a tail class, stage 2
    voxels whose second most probable class is one; both are ranked by tail
    score. Leftover budget is filled by cycling the chosen voxels in rank
    order. With no candidate at all, the best-scoring voxels are used.
    """
    if budget < 1:
        raise ValueError(f"tail budget must be >= 1, got {budget}")
    n = len(pred)
    if n == 0:
        raise DataError("coarse prediction has no voxels")
    scores = tail_score(pred, tax)
    allowed = np.ones(n, dtype=bool)
    if exclude is not None:
        ex = {tuple(int(v) for v in c) for c in exclude}
        if ex:
            allowed = np.array([tuple(int(v) for v in c) not in ex for c in pred.coords], dtype=bool)

    # stable sort on -prob: equal probabilities keep the lower class id first
    by_prob = np.argsort(-pred.probs, axis=1, kind="stable")
    is_tail = np.zeros(pred.probs.shape[1], dtype=bool)
    is_tail[tax.tail_ids()] = True
    top1 = is_tail[by_prob[:, 0]]
    top2 = is_tail[by_prob[:, 1]] & ~top1 if pred.probs.shape[1] > 1 else np.zeros(n, dtype=bool)

    chosen = _rank(scores, pred.coords, np.flatnonzero(top1 & allowed))[:budget]
    if chosen.size < budget:
        extra = _rank(scores, pred.coords, np.flatnonzero(top2 & allowed))
        chosen = np.concatenate([chosen, extra[: budget - chosen.size]])
    if chosen.size == 0:
        pool = np.flatnonzero(allowed)
        if pool.size == 0:
            pool = np.arange(n)
        chosen = _rank(scores, pred.coords, pool)[:budget]

    mult = np.full(chosen.size, budget // chosen.size, dtype=np.int64)
    mult[: budget % chosen.size] += 1
    return SelectionResult(
        coords=pred.coords[chosen],
        scores=scores[chosen],
        source=("tail",) * chosen.size,
        multiplicity=mult,
        indices=chosen,
    )


def refine_forward(features: np.ndarray, coarse: np.ndarray,
                   refine_params: Mapping[str, np.ndarray]) -> tuple[np.ndarray, dict]:
    """One-hidden-layer rectifier MLP over ``[features, coarse]``; returns logits and cache."""
    features = np.asarray(features, dtype=np.float64)
    coarse = np.asarray(coarse, dtype=np.float64)
    if features.ndim != 2 or coarse.ndim != 2 or features.shape[0] != coarse.shape[0]:
        raise StructuralError(f"row mismatch: features {features.shape}, coarse {coarse.shape}")
    z = np.concatenate([features, coarse], axis=1)
    pre = _affine(z, refine_params["W1"], refine_params["b1"])
    hid = np.maximum(pre, 0.0)
    out = _affine(hid, refine_params["W2"], refine_params["b2"])
    return out, {"z": z, "pre": pre, "hid": hid, "split": features.shape[1]}


def refine_tail(features: np.ndarray, coarse: np.ndarray,
                refine_params: Mapping[str, np.ndarray]) -> np.ndarray:
    return refine_forward(features, coarse, refine_params)[0]


def refine_backward(cache: dict, dout: np.ndarray, refine_params: Mapping[str, np.ndarray]):
    """Gradients of the refinement MLP: (param grads, d features, d coarse)."""
    grads = {
        "W2": cache["hid"].T @ dout,
        "b2": dout.sum(axis=0),
    }
    dpre = (dout @ refine_params["W2"].T) * (cache["pre"] > 0)
    grads["W1"] = cache["z"].T @ dpre
    grads["b1"] = dpre.sum(axis=0)
    dz = dpre @ refine_params["W1"].T
    s = cache["split"]
    return grads, dz[:, :s], dz[:, s:]
