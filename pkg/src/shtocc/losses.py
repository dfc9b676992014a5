"""Cross-entropy, tail voxel loss and label smoothing, each with its logit gradient."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import NumericError


@dataclass(frozen=True)
class LossValue:
    value: float
    contributions: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise NumericError(f"loss is not finite: {self.value}")


@dataclass(frozen=True)
class SmoothingConfig:
    """Smoothing factor, either one global value or one value per class."""

    epsilon: float | Sequence[float] = 0.1

    def __post_init__(self):
        eps = np.atleast_1d(np.asarray(self.epsilon, dtype=np.float64))
        if (eps < 0).any() or (eps >= 1).any():
            raise ValueError(f"smoothing factors must lie in [0, 1), got {self.epsilon}")

    def per_class(self, C: int) -> np.ndarray:
        eps = np.atleast_1d(np.asarray(self.epsilon, dtype=np.float64))
        if eps.size == 1:
            return np.full(C, eps[0])
        if eps.size != C:
            raise ValueError(f"got {eps.size} smoothing factors for {C} classes")
        return eps


def _check(logits: np.ndarray, labels) -> tuple[np.ndarray, np.ndarray]:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ValueError(f"logits {logits.shape} do not match {labels.shape[0]} labels")
    if logits.shape[0] == 0:
        raise ValueError("loss over zero samples is undefined")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError(f"labels must lie in [0, {logits.shape[1]})")
    if not np.isfinite(logits).all():
        raise NumericError("logits contain non-finite values")
    return logits, labels


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits, labels, weights=None) -> tuple[LossValue, np.ndarray]:
    """(Weighted) mean negative log-likelihood and its gradient w.r.t. ``logits``."""
    logits, labels = _check(logits, labels)
    n = logits.shape[0]
    rows = np.arange(n)
    logp = log_softmax(logits)
    nll = -logp[rows, labels]
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    if weights is None:
        return LossValue(float(np.mean(nll)), nll), grad / n
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape != (n,) or (w <= 0).any():
        raise ValueError("weights must be one positive value per sample")
    total = np.sum(w)
    contrib = nll * w * (n / total)
    return LossValue(float(np.sum(nll * w) / total), contrib), grad * (w / total)[:, None]


def tail_voxel_loss(refined, tail_labels, multiplicity) -> tuple[LossValue, np.ndarray]:
    """Cross-entropy on refined tail logits, repetition entering as sample weights."""
    return cross_entropy(refined, tail_labels, weights=multiplicity)


def total_loss(base: LossValue, tvl: LossValue, tvl_weight: float = 1.0) -> LossValue:
    # tvl_weight != 1 is an extension; the default keeps the plain sum
    value = base.value + tvl.value if tvl_weight == 1.0 else base.value + tvl_weight * tvl.value
    return LossValue(value, np.array([base.value, tvl.value]))


def smoothed_targets(label: int, C: int, cfg: SmoothingConfig) -> np.ndarray:
    if C < 2:
        raise ValueError("label smoothing needs at least 2 classes")
    if not 0 <= label < C:
        raise ValueError(f"label {label} outside [0, {C})")
    eps = cfg.per_class(C)[label]
    t = np.full(C, eps / (C - 1))
    t[label] = 1.0 - eps
    return t


def smoothed_target_matrix(labels: np.ndarray, C: int, cfg: SmoothingConfig) -> np.ndarray:
    eps = cfg.per_class(C)[labels]
    t = np.repeat((eps / (C - 1))[:, None], C, axis=1)
    t[np.arange(labels.size), labels] = 1.0 - eps
    return t


def label_smoothing_loss(logits, labels, cfg: SmoothingConfig, weights=None) -> tuple[LossValue, np.ndarray]:
    """Mean cross-entropy against smoothed targets; optional per-sample weights as in
    :func:`cross_entropy`."""
    logits, labels = _check(logits, labels)
    n, C = logits.shape
    if C < 2:
        raise ValueError("label smoothing needs at least 2 classes")
    target = smoothed_target_matrix(labels, C, cfg)
    logp = log_softmax(logits)
    per = -np.sum(target * logp, axis=1)
    if weights is None:
        return LossValue(float(np.mean(per)), per), (np.exp(logp) - target) / n
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape != (n,) or (w <= 0).any():
        raise ValueError("weights must be one positive value per sample")
    total = np.sum(w)
    return (LossValue(float(np.sum(per * w) / total), per * w * (n / total)),
            (np.exp(logp) - target) * (w / total)[:, None])
