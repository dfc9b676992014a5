"""Scaled dot-product attention scoring and attention-guided head voxel selection."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import NumericError, StructuralError
from .voxel_core import SelectionResult

ROW_SUM_TOL = 1e-6


@dataclass(frozen=True)
class AttentionMatrix:
    """L x S row-stochastic weights (queries x keys)."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] < 1 or w.shape[1] < 1:
            raise StructuralError(f"attention matrix must be L x S with L, S >= 1, got {w.shape}")
        if not np.isfinite(w).all() or w.min() < 0.0 or w.max() > 1.0:
            raise NumericError("attention weights must be finite and in [0, 1]")
        if np.abs(w.sum(axis=1) - 1.0).max() > ROW_SUM_TOL:
            raise NumericError("attention rows must sum to 1")
        w = w.copy()
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    @property
    def shape(self) -> tuple[int, int]:
        return self.weights.shape


@dataclass(frozen=True)
class QueryBank:
    queries: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.queries, dtype=np.float64)
        if q.ndim != 2 or q.shape[1] < 1:
            raise StructuralError(f"query bank must be L x d_k with d_k >= 1, got {q.shape}")
        if not np.isfinite(q).all():
            raise NumericError("query bank has non-finite entries")
        object.__setattr__(self, "queries", q)


def attention_scores(queries: QueryBank | np.ndarray, keys: np.ndarray) -> np.ndarray:
    """Raw scores ``(q_l . k_s) / sqrt(d_k)``, shape L x S."""
    q = queries.queries if isinstance(queries, QueryBank) else np.asarray(queries, dtype=np.float64)
    k = np.asarray(keys, dtype=np.float64)
    if q.ndim != 2 or k.ndim != 2:
        raise StructuralError("queries and keys must be 2-D")
    if q.shape[1] == 0 or k.shape[1] == 0:
        raise StructuralError("d_k must be >= 1")
    if q.shape[1] != k.shape[1]:
        raise StructuralError(f"query width {q.shape[1]} != key width {k.shape[1]}")
    return (q @ k.T) / math.sqrt(q.shape[1])


def softmax_rows(raw: np.ndarray) -> np.ndarray:
    """Row softmax with per-row max subtraction, returned as a plain array."""
    z = np.asarray(raw, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def normalize_rows(raw: np.ndarray) -> AttentionMatrix:
    raw = np.asarray(raw, dtype=np.float64)
    if not np.isfinite(raw).all():
        raise NumericError("raw attention scores must be finite")
    return AttentionMatrix(softmax_rows(raw))


def average_heads(heads: Sequence[AttentionMatrix]) -> AttentionMatrix:
    if len(heads) == 0:
        raise StructuralError("need at least one attention head")
    shape = heads[0].shape
    for i, h in enumerate(heads):
        if h.shape != shape:
            raise StructuralError(f"head {i} has shape {h.shape}, expected {shape}")
    if len(heads) == 1:
        return heads[0]
    return AttentionMatrix(np.mean(np.stack([h.weights for h in heads]), axis=0))


def key_importance(m: AttentionMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Per-key maximal attention weight and the query index that assigns it.

    The arg-query is the argmax over the query axis; its weight is the score used
    to rank keys.
    """
    w = m.weights
    arg = np.argmax(w, axis=0)
    return w[arg, np.arange(w.shape[1])], arg


def rank_desc(scores: np.ndarray) -> np.ndarray:
    """Indices sorted by score descending; equal scores keep ascending index order."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def select_head(m: AttentionMatrix, coords, k: int) -> SelectionResult:
    """Top-k keys by importance, ties to the lowest key index."""
    if k < 1:
        raise ValueError(f"head budget k must be >= 1, got {k}")
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    if coords.shape[0] != m.shape[1]:
        raise StructuralError(f"{coords.shape[0]} coordinates for {m.shape[1]} keys")
    scores, _ = key_importance(m)
    top = rank_desc(scores)[: min(k, scores.size)]
    return SelectionResult(
        coords=coords[top],
        scores=scores[top],
        source=("head",) * top.size,
        multiplicity=np.ones(top.size, dtype=np.int64),
        indices=top,
    )
