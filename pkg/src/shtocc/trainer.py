"""Two-phase decoupled training and evaluation of the toy decoder."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np

from . import toynet
from .attention import AttentionMatrix, select_head
from .errors import ConfigError, NumericError, StructuralError
from .losses import (LossValue, SmoothingConfig, cross_entropy, label_smoothing_loss,
                     tail_voxel_loss, total_loss)
from .metrics import ConfusionMatrix, MetricsReport, confusion, iou_report
from .tail import ClassTaxonomy, CoarsePrediction, select_tail
from .voxel_core import (DenseFeatureGrid, DenseLabelGrid, SelectionResult, SparseVoxelSet,
                         empty_selection, gather_labels, sparsify, voxel_completion)

log = logging.getLogger(__name__)


class Scene(NamedTuple):
    features: DenseFeatureGrid
    labels: DenseLabelGrid


@dataclass(frozen=True)
class TrainConfig:
    phase1_epochs: int = 60
    phase2_epochs: int = 20
    lr1: float = 0.1
    lr2: float = 0.3
    head_fraction: float = 0.05
    layers: int = 1
    growth: float = 1.0
    epsilon: float = 0.1
    seed: int = 0
    tail_threshold: float = 0.01
    # ablation switches
    head_selection: bool = True
    tail_selection: bool = True
    tail_loss: bool = True
    decouple: bool = True
    tvl_weight: float = 1.0
    # phase-2 voxels: "all" non-empty voxels, or the "head_tail" selection with multiplicities
    phase2_sampling: str = "all"
    # classes whose targets are smoothed in phase 2: "all" or only "head" classes
    smooth_classes: str = "all"
    # decoder widths
    d_model: int = 16
    num_queries: int = 8
    num_heads: int = 2
    ffn_hidden: int = 32

    def __post_init__(self):
        def bad(name, constraint):
            raise ConfigError(f"{name}={getattr(self, name)!r}: must be {constraint}")

        for name in ("phase1_epochs", "phase2_epochs"):
            if int(getattr(self, name)) != getattr(self, name) or getattr(self, name) < 0:
                bad(name, "an integer >= 0")
        for name in ("lr1", "lr2"):
            if not getattr(self, name) >= 0 or not math.isfinite(getattr(self, name)):
                bad(name, "a finite real >= 0")
        if not 0 < self.head_fraction <= 1:
            bad("head_fraction", "in (0, 1]")
        if self.layers < 1:
            bad("layers", ">= 1")
        if not self.growth >= 1:
            bad("growth", ">= 1")
        if not 0 <= self.epsilon < 1:
            bad("epsilon", "in [0, 1)")
        if not 0 < self.tail_threshold < 1:
            bad("tail_threshold", "in (0, 1)")
        if self.tail_selection and not self.head_selection:
            bad("tail_selection", "off when head_selection is off (tail budget follows the head budget)")
        if self.tail_loss and not self.tail_selection:
            bad("tail_loss", "off when tail_selection is off")
        if self.smooth_classes not in ("all", "head"):
            bad("smooth_classes", "'all' or 'head'")
        if self.phase2_sampling not in ("all", "head_tail"):
            bad("phase2_sampling", "'all' or 'head_tail'")
        for name in ("d_model", "num_queries", "num_heads", "ffn_hidden"):
            if getattr(self, name) < 1:
                bad(name, ">= 1")

    def arch(self, in_channels: int, num_classes: int) -> toynet.Arch:
        return toynet.Arch(in_channels, num_classes, self.d_model, self.num_queries,
                           self.num_heads, self.ffn_hidden)

    def selection_meta(self) -> dict:
        keys = ("head_fraction", "layers", "growth", "head_selection", "tail_selection")
        return {k: getattr(self, k) for k in keys}


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    wall_times: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def extend(self, other: "TrainLog") -> "TrainLog":
        return TrainLog(self.records + other.records, self.wall_times + other.wall_times)


class TrainingAborted(NumericError):
    """Non-finite loss or gradient; carries the last parameters known to be finite."""

    def __init__(self, message: str, last_good: toynet.ToyDecoderParams, log: TrainLog):
        super().__init__(message)
        self.last_good = last_good
        self.log = log


def selection_schedule(k0: int, layers: int, growth: float) -> list[int]:
    """Coarse-to-fine per-layer budgets ``ceil(k0 * growth**l)``."""
    if k0 < 1 or layers < 1:
        raise ValueError("k0 and layers must be >= 1")
    if growth < 1:
        raise ValueError(f"growth must be >= 1, got {growth}")
    return [int(math.ceil(k0 * growth ** l)) for l in range(layers)]


def head_budget(cfg: TrainConfig, S: int) -> int:
    k0 = max(1, int(math.ceil(cfg.head_fraction * S)))
    return min(selection_schedule(k0, cfg.layers, cfg.growth)[-1], S)


@dataclass
class StepSelection:
    head: SelectionResult
    tail: SelectionResult | None
    refine_idx: np.ndarray | None  # None: every voxel refined

    def combined(self) -> SelectionResult:
        return self.head if self.tail is None else SelectionResult.concat(self.head, self.tail)


def choose_voxels(cfg: TrainConfig, tr: toynet.ForwardTrace, coords: np.ndarray,
                  tax: ClassTaxonomy) -> StepSelection:
    """Head selection from attention, then tail selection from the coarse prediction."""
    if not cfg.head_selection:
        return StepSelection(empty_selection(), None, None)
    S = coords.shape[0]
    k = head_budget(cfg, S)
    head = select_head(AttentionMatrix(tr.mean_attention), coords, k)
    if not (cfg.tail_selection and tax.tail_set):
        return StepSelection(head, None, np.sort(head.indices))
    tail = select_tail(CoarsePrediction(tr.coarse, coords), tax, k, exclude=head.coords)
    if tail.tail_total() != head.head_count():
        raise AssertionError(f"tail budget {tail.tail_total()} != head count {head.head_count()}")
    return StepSelection(head, tail, np.union1d(head.indices, tail.indices))


def _prepare(scene: Scene, in_channels: int) -> tuple[SparseVoxelSet, np.ndarray]:
    vox = sparsify(scene.features, scene.labels)
    if vox.channels != in_channels:
        raise StructuralError(f"scene has {vox.channels} feature channels, decoder expects {in_channels}")
    if len(vox) == 0:
        raise StructuralError("scene has no non-empty voxel")
    return vox, gather_labels(scene.labels, vox.coords)


def _check_scenes(scenes: Sequence[Scene]) -> list[Scene]:
    scenes = [s if isinstance(s, Scene) else Scene(*s) for s in scenes]
    if not scenes:
        raise ValueError("need at least one scene")
    dims, ch = scenes[0].features.dims, scenes[0].features.channels
    for i, s in enumerate(scenes):
        if s.features.dims != dims or s.labels.dims != dims or s.features.channels != ch:
            raise StructuralError(f"scene {i} does not share dims/channels with scene 0")
    return scenes


def baseline_loss(tr: toynet.ForwardTrace, labels: np.ndarray):
    """Per-voxel CE on the completed-grid logits plus CE on the coarse prediction.

    Returns the loss and the gradients w.r.t. segmentation and coarse logits.
    """
    seg, gseg = cross_entropy(tr.logits, labels)
    coarse, gcoarse = cross_entropy(tr.coarse_logits, labels)
    value = seg.value + coarse.value
    return LossValue(value, np.array([seg.value, coarse.value])), gseg, gcoarse


def _phase1_step(cfg, params, vox, labels, scene, tax):
    tr = toynet.encode(params, vox)
    sel = choose_voxels(cfg, tr, vox.coords, tax)
    tail_idx = sel.tail.indices if (cfg.tail_loss and sel.tail is not None) else None
    toynet.decode(params, tr, sel.refine_idx, tail_idx)
    base, gbase, gcoarse = baseline_loss(tr, labels)
    if tail_idx is not None:
        tail_labels = gather_labels(scene.labels, sel.tail.coords)
        tvl, gtail = tail_voxel_loss(tr.tail_logits, tail_labels, sel.tail.multiplicity)
        if cfg.tvl_weight != 1.0:
            gtail = gtail * cfg.tvl_weight
    else:
        tvl, gtail = LossValue(0.0), None
    tot = total_loss(base, tvl, cfg.tvl_weight)
    if not math.isfinite(tot.value):
        raise NumericError("non-finite phase-1 loss")
    if cfg.lr1 > 0:
        grads = toynet.backward(params, tr, gbase, gtail, gcoarse)
        params = toynet.sgd_step(params, grads, cfg.lr1)
    return params, sel, base, tvl


def phase1_train(cfg: TrainConfig, scenes: Sequence[Scene], tax: ClassTaxonomy,
                 params: toynet.ToyDecoderParams) -> tuple[toynet.ToyDecoderParams, TrainLog]:
    """Joint training on baseline CE plus the tail voxel loss, all groups trainable."""
    scenes = _check_scenes(scenes)
    params = toynet.set_freeze(params, ())
    prepared = [_prepare(s, params.arch.in_channels) for s in scenes]
    out = TrainLog()
    for epoch in range(cfg.phase1_epochs):
        t0 = time.perf_counter()
        base_vals, tvl_vals, heads, tails, uniq = [], [], [], [], []
        for i, ((vox, labels), scene) in enumerate(zip(prepared, scenes)):
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    params, sel, base, tvl = _phase1_step(cfg, params, vox, labels, scene, tax)
            except NumericError as exc:
                raise TrainingAborted(f"epoch {epoch}, scene {i}: {exc}", params, out) from exc
            base_vals.append(base.value)
            tvl_vals.append(tvl.value)
            heads.append(sel.head.head_count())
            tails.append(sel.tail.tail_total() if sel.tail is not None else 0)
            uniq.append(len(vox) if sel.refine_idx is None else int(sel.refine_idx.size))
        b, t = float(np.mean(base_vals)), float(np.mean(tvl_vals))
        rec = {
            "phase": 1, "epoch": epoch,
            "baseline": b, "tvl": t,
            "total": b + t if cfg.tvl_weight == 1.0 else b + cfg.tvl_weight * t,
            "ls": None,
            "head_selected": int(np.sum(heads)), "tail_selected": int(np.sum(tails)),
            "unique_refined": int(np.sum(uniq)),
        }
        out.records.append(rec)
        out.wall_times.append(time.perf_counter() - t0)
        log.info("phase 1 epoch %d: total %.5f (baseline %.5f, tvl %.5f)", epoch, rec["total"], b, t)
    return params, out


def smoothing_for(cfg: TrainConfig, tax: ClassTaxonomy) -> SmoothingConfig:
    """Global smoothing factor, or per-class factors that leave tail targets one-hot."""
    if cfg.smooth_classes == "all":
        return SmoothingConfig(cfg.epsilon)
    eps = [0.0 if c in tax.tail_set else cfg.epsilon for c in range(tax.num_classes)]
    return SmoothingConfig(tuple(eps))


def _phase2_batches(cfg, prepared, params, tax):
    """Fixed (completed features, labels, weights) per scene for head retraining."""
    batches = []
    for vox, labels in prepared:
        tr = toynet.encode(params, vox)
        sel = choose_voxels(cfg, tr, vox.coords, tax)
        toynet.decode(params, tr, sel.refine_idx)
        if cfg.phase2_sampling == "all" or not cfg.head_selection:
            batches.append((tr.completed, labels, None))
            continue
        picked = sel.combined()
        batches.append((tr.completed[picked.indices], labels[picked.indices],
                        picked.multiplicity.astype(np.float64)))
    return batches


def phase2_retrain_head(cfg: TrainConfig, params: toynet.ToyDecoderParams, scenes: Sequence[Scene],
                        tax: ClassTaxonomy) -> tuple[toynet.ToyDecoderParams, TrainLog]:
    """Retrain only the segmentation head with label smoothing over all non-empty voxels.

    The returned parameters carry the freeze mask they came in with.
    """
    scenes = _check_scenes(scenes)
    entry_mask = dict(params.freeze_mask)
    params = toynet.set_freeze(params, [g for g in toynet.GROUPS if g != "seg_head"])
    prepared = [_prepare(s, params.arch.in_channels) for s in scenes]
    smoothing = smoothing_for(cfg, tax)
    out = TrainLog()
    # everything upstream of the head is frozen, so completed features are fixed
    try:
        batches = _phase2_batches(cfg, prepared, params, tax) if cfg.phase2_epochs else []
    except NumericError as exc:
        raise TrainingAborted(f"phase-2 setup: {exc}", params, out) from exc
    for epoch in range(cfg.phase2_epochs):
        t0 = time.perf_counter()
        vals = []
        for i, (feats, labels, weights) in enumerate(batches):
            seg = params["seg_head"]
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    ls, g = label_smoothing_loss(feats @ seg["W"] + seg["b"], labels, smoothing, weights)
                    if not math.isfinite(ls.value):
                        raise NumericError("non-finite phase-2 loss")
                    if cfg.lr2 > 0:
                        grads = {name: {} for name in toynet.GROUPS}
                        grads["seg_head"] = {"W": feats.T @ g, "b": g.sum(axis=0)}
                        params = toynet.sgd_step(params, grads, cfg.lr2)
            except NumericError as exc:
                raise TrainingAborted(f"epoch {epoch}, scene {i}: {exc}", params, out) from exc
            vals.append(ls.value)
        out.records.append({"phase": 2, "epoch": epoch, "ls": float(np.mean(vals))})
        out.wall_times.append(time.perf_counter() - t0)
        log.info("phase 2 epoch %d: ls %.5f", epoch, out.records[-1]["ls"])
    return replace(params, freeze_mask=entry_mask), out


def train(cfg: TrainConfig, scenes: Sequence[Scene], tax: ClassTaxonomy,
          params: toynet.ToyDecoderParams | None = None):
    """Phase 1, then phase 2 when ``cfg.decouple``; returns (phase-1 params, final params, log)."""
    scenes = _check_scenes(scenes)
    if params is None:
        arch = cfg.arch(scenes[0].features.channels, tax.num_classes)
        params = toynet.init_params(arch, np.random.default_rng(cfg.seed))
    p1, log1 = phase1_train(cfg, scenes, tax, params)
    if not cfg.decouple:
        return p1, p1, log1
    p2, log2 = phase2_retrain_head(cfg, p1, scenes, tax)
    return p1, p2, log1.extend(log2)


def predict_scene(cfg: TrainConfig, params: toynet.ToyDecoderParams, scene: Scene,
                  tax: ClassTaxonomy) -> tuple[DenseLabelGrid, StepSelection, int]:
    """Dense prediction: encode, select, refine, complete, classify non-empty voxels."""
    vox, _ = _prepare(scene, params.arch.in_channels)
    tr = toynet.encode(params, vox)
    sel = choose_voxels(cfg, tr, vox.coords, tax)
    toynet.decode(params, tr, sel.refine_idx)
    enc = params["encoder"]
    dims = scene.features.dims
    encoded = DenseFeatureGrid(dims, scene.features.values @ enc["W"] + enc["b"])
    idx = np.arange(len(vox)) if sel.refine_idx is None else sel.refine_idx
    refined = SparseVoxelSet(dims, vox.coords[idx], tr.R, channels=params.arch.d_model)
    completed = voxel_completion(encoded, refined)
    occupied = np.flatnonzero(scene.labels.labels != 0)
    seg = params["seg_head"]
    logits = completed.values[occupied] @ seg["W"] + seg["b"]
    pred = np.zeros(dims.size, dtype=np.int64)
    pred[occupied] = np.argmax(logits, axis=1)
    return DenseLabelGrid(dims, pred, params.arch.num_classes), sel, int(idx.size)


def evaluate(params: toynet.ToyDecoderParams, scenes: Sequence[Scene], tax: ClassTaxonomy,
             cfg: TrainConfig | None = None) -> MetricsReport:
    cfg = cfg or TrainConfig()
    scenes = _check_scenes(scenes)
    t0 = time.perf_counter()
    cm: ConfusionMatrix | None = None
    refined_frac, occupied, total, n_sel = [], 0, 0, 0
    for scene in scenes:
        pred, sel, n_refined = predict_scene(cfg, params, scene, tax)
        part = confusion(pred, scene.labels, num_classes=tax.num_classes)
        cm = part if cm is None else cm + part
        S = scene.labels.nonempty_count()
        refined_frac.append(n_refined / S)
        n_sel += n_refined
        occupied += S
        total += scene.labels.dims.size
    report = iou_report(cm, tax)
    report.nonempty_fraction = occupied / total
    report.selected_fraction = float(np.mean(refined_frac))
    report.unique_selected = n_sel
    report.wall_times = {"evaluate": time.perf_counter() - t0}
    return report


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
