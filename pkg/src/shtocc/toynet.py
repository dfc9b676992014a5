"""Desk-scale decoder with a hand-written backward pass.

Data flow for N sparse voxels with input features X (N x F)::

    E   = X W_enc + b_enc                       encoded voxels (N x d)
    A_h = softmax(Qb W_Q[h] (E W_K[h])^T / sqrt d)   per-head attention (L x N)
    O_h = A_h E W_V[h]                          query read-out (L x d)
    G   = mean_h A_h[:, sel]^T O_h              message back to selected voxels
    Y   = E[sel] + G
    R   = Y + relu(Y W1 + b1) W2 + b2           refined selected voxels
    Fc  = E with rows sel replaced by R         voxel completion
    logits = Fc W_seg + b_seg
    P   = softmax(E W_c + b_c)                  coarse per-voxel prediction
    T   = MLP([Fc[tail], P[tail]])              refined tail logits

Selection indices are inputs; no gradient flows through them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping

import numpy as np

from .attention import AttentionMatrix, softmax_rows
from .errors import NumericError, StructuralError
from .tail import refine_backward, refine_forward
from .voxel_core import SparseVoxelSet

GROUPS = ("encoder", "queries", "attention", "ffn", "coarse", "refine", "seg_head")


@dataclass(frozen=True)
class Arch:
    in_channels: int
    num_classes: int
    d_model: int = 16
    num_queries: int = 8
    num_heads: int = 2
    ffn_hidden: int = 32

    def __post_init__(self):
        for k, v in vars(self).items():
            if int(v) != v or v < 1:
                raise StructuralError(f"architecture field {k}={v} must be a positive integer")

    def shapes(self) -> dict[str, dict[str, tuple[int, ...]]]:
        F, C, d = self.in_channels, self.num_classes, self.d_model
        H, L, dh = self.num_heads, self.num_queries, self.ffn_hidden
        return {
            "encoder": {"W": (F, d), "b": (d,)},
            "queries": {"Q": (L, d)},
            "attention": {"WQ": (H, d, d), "WK": (H, d, d), "WV": (H, d, d)},
            "ffn": {"W1": (d, dh), "b1": (dh,), "W2": (dh, d), "b2": (d,)},
            "coarse": {"W": (d, C), "b": (C,)},
            "refine": {"W1": (d + C, d), "b1": (d,), "W2": (d, C), "b2": (C,)},
            "seg_head": {"W": (d, C), "b": (C,)},
        }


# fan-in used for the uniform init bound of each array
_FAN_IN = {
    ("encoder", "W"): "F", ("encoder", "b"): "F",
    ("queries", "Q"): "d",
    ("attention", "WQ"): "d", ("attention", "WK"): "d", ("attention", "WV"): "d",
    ("ffn", "W1"): "d", ("ffn", "b1"): "d", ("ffn", "W2"): "dh", ("ffn", "b2"): "dh",
    ("coarse", "W"): "d", ("coarse", "b"): "d",
    ("refine", "W1"): "dC", ("refine", "b1"): "dC", ("refine", "W2"): "d", ("refine", "b2"): "d",
    ("seg_head", "W"): "d", ("seg_head", "b"): "d",
}


@dataclass(frozen=True)
class ToyDecoderParams:
    arch: Arch
    groups: dict[str, dict[str, np.ndarray]]
    freeze_mask: dict[str, bool] = field(default_factory=lambda: {g: False for g in GROUPS})

    def __post_init__(self):
        shapes = self.arch.shapes()
        if set(self.groups) != set(GROUPS) or set(self.freeze_mask) != set(GROUPS):
            raise StructuralError(f"parameter groups must be exactly {GROUPS}")
        for g, arrays in shapes.items():
            if set(self.groups[g]) != set(arrays):
                raise StructuralError(f"group {g} must hold arrays {sorted(arrays)}")
            for name, shape in arrays.items():
                a = self.groups[g][name]
                if a.shape != shape:
                    raise StructuralError(f"{g}.{name} has shape {a.shape}, expected {shape}")
                if not np.isfinite(a).all():
                    raise NumericError(f"{g}.{name} has non-finite entries")

    def __getitem__(self, group: str) -> dict[str, np.ndarray]:
        return self.groups[group]

    def count(self) -> int:
        return sum(a.size for g in self.groups.values() for a in g.values())

    def trainable(self) -> list[str]:
        return [g for g in GROUPS if not self.freeze_mask[g]]


def init_params(arch: Arch, rng: np.random.Generator) -> ToyDecoderParams:
    """Uniform init in +-1/sqrt(fan_in), drawn in a fixed group/array order."""
    fans = {"F": arch.in_channels, "d": arch.d_model, "dh": arch.ffn_hidden,
            "dC": arch.d_model + arch.num_classes}
    groups = {}
    for g in GROUPS:
        groups[g] = {}
        for name, shape in arch.shapes()[g].items():
            bound = 1.0 / math.sqrt(fans[_FAN_IN[(g, name)]])
            groups[g][name] = rng.uniform(-bound, bound, size=shape)
    return ToyDecoderParams(arch, groups)


def zeros_like(params: ToyDecoderParams) -> dict[str, dict[str, np.ndarray]]:
    return {g: {k: np.zeros_like(v) for k, v in arrs.items()} for g, arrs in params.groups.items()}


def zero_params(arch: Arch) -> ToyDecoderParams:
    return ToyDecoderParams(arch, {g: {k: np.zeros(s) for k, s in a.items()} for g, a in arch.shapes().items()})


def nearest_centroid_params(arch: Arch, centroids: np.ndarray, empty_bias: float = -1e6) -> ToyDecoderParams:
    """Parameters that classify each voxel by its nearest class centroid.

    Encoder copies the input into the first channels, attention and FFN
    contribute nothing, and the segmentation head scores
    ``x . mu_c - |mu_c|^2 / 2``. Row 0 of ``centroids`` (empty) is ignored.
    """
    F, d = arch.in_channels, arch.d_model
    if d < F:
        raise StructuralError(f"d_model={d} must be >= in_channels={F} for the centroid classifier")
    centroids = np.asarray(centroids, dtype=np.float64)
    if centroids.shape != (arch.num_classes, F):
        raise StructuralError(f"centroids must be ({arch.num_classes}, {F}), got {centroids.shape}")
    p = zero_params(arch)
    p.groups["encoder"]["W"][:, :F] = np.eye(F)
    p.groups["seg_head"]["W"][:F, :] = centroids.T
    p.groups["seg_head"]["b"][:] = -0.5 * (centroids ** 2).sum(axis=1)
    p.groups["seg_head"]["b"][0] = empty_bias
    return p


@dataclass
class ForwardTrace:
    X: np.ndarray
    E: np.ndarray
    Q: list
    K: list
    V: list
    A: list
    O: list
    coarse: np.ndarray
    coarse_logits: np.ndarray
    sel: np.ndarray | None = None
    tail: np.ndarray | None = None
    Y: np.ndarray | None = None
    hpre: np.ndarray | None = None
    R: np.ndarray | None = None
    completed: np.ndarray | None = None
    logits: np.ndarray | None = None
    refine_cache: dict | None = None
    tail_logits: np.ndarray | None = None

    @property
    def mean_attention(self) -> np.ndarray:
        return np.mean(np.stack(self.A), axis=0)


def _features(voxels) -> np.ndarray:
    if isinstance(voxels, SparseVoxelSet):
        return np.asarray(voxels.features)
    return np.asarray(voxels, dtype=np.float64)


def encode(params: ToyDecoderParams, voxels) -> ForwardTrace:
    """Encoder, multi-head attention over all voxels, and the coarse prediction."""
    X = _features(voxels)
    arch = params.arch
    if X.ndim != 2 or X.shape[1] != arch.in_channels:
        raise StructuralError(f"voxel features {X.shape} do not match in_channels={arch.in_channels}")
    if X.shape[0] == 0:
        raise StructuralError("forward needs at least one voxel")
    E = X @ params["encoder"]["W"] + params["encoder"]["b"]
    at = params["attention"]
    Qb = params["queries"]["Q"]
    scale = 1.0 / math.sqrt(arch.d_model)
    Qs, Ks, Vs, As, Os = [], [], [], [], []
    for h in range(arch.num_heads):
        Q = Qb @ at["WQ"][h]
        K = E @ at["WK"][h]
        V = E @ at["WV"][h]
        A = softmax_rows((Q @ K.T) * scale)
        Qs.append(Q), Ks.append(K), Vs.append(V), As.append(A), Os.append(A @ V)
    coarse_logits = E @ params["coarse"]["W"] + params["coarse"]["b"]
    return ForwardTrace(X, E, Qs, Ks, Vs, As, Os, softmax_rows(coarse_logits), coarse_logits)


def decode(params: ToyDecoderParams, tr: ForwardTrace, refine_idx=None, tail_idx=None) -> ForwardTrace:
    """Refine the selected voxels, complete the grid, and run both heads.

    ``refine_idx`` defaults to every voxel. ``tail_idx`` (row indices, may be
    empty) enables the tail refinement branch.
    """
    N = tr.E.shape[0]
    sel = np.arange(N) if refine_idx is None else np.asarray(refine_idx, dtype=np.int64)
    if sel.size and (sel.min() < 0 or sel.max() >= N):
        raise StructuralError("refine indices out of range")
    H = params.arch.num_heads
    G = sum(tr.A[h][:, sel].T @ tr.O[h] for h in range(H)) / H
    Y = tr.E[sel] + G
    f = params["ffn"]
    hpre = Y @ f["W1"] + f["b1"]
    R = Y + np.maximum(hpre, 0.0) @ f["W2"] + f["b2"]
    completed = tr.E.copy()
    completed[sel] = R
    logits = completed @ params["seg_head"]["W"] + params["seg_head"]["b"]
    tr.sel, tr.Y, tr.hpre, tr.R, tr.completed, tr.logits = sel, Y, hpre, R, completed, logits
    tr.tail = tr.refine_cache = tr.tail_logits = None
    if tail_idx is not None:
        t = np.asarray(tail_idx, dtype=np.int64)
        if t.size and (t.min() < 0 or t.max() >= N):
            raise StructuralError("tail indices out of range")
        tr.tail = t
        tr.tail_logits, tr.refine_cache = refine_forward(completed[t], tr.coarse[t], params["refine"])
    return tr


def forward(params: ToyDecoderParams, voxels, refine_idx=None, tail_idx=None):
    """Full pass; returns (refined features, per-head attention, logits, trace)."""
    tr = decode(params, encode(params, voxels), refine_idx, tail_idx)
    heads = [AttentionMatrix(a) for a in tr.A]
    return tr.R, heads, tr.logits, tr


def backward(params: ToyDecoderParams, tr: ForwardTrace, dlogits, dtail=None, dcoarse=None) -> dict:
    """Gradients for every group.

    ``dlogits`` is dL/d(segmentation logits); ``dtail`` optionally dL/d(tail
    logits) and ``dcoarse`` optionally dL/d(coarse logits, before softmax).
    """
    if tr.logits is None:
        raise StructuralError("trace has not been decoded")
    dlogits = np.asarray(dlogits, dtype=np.float64)
    if dlogits.shape != tr.logits.shape:
        raise StructuralError(f"upstream gradient {dlogits.shape} != logits {tr.logits.shape}")
    arch = params.arch
    g = zeros_like(params)
    seg = params["seg_head"]
    g["seg_head"]["W"] = tr.completed.T @ dlogits
    g["seg_head"]["b"] = dlogits.sum(axis=0)
    dFc = dlogits @ seg["W"].T
    dE = np.zeros_like(tr.E)

    dLc = np.zeros_like(tr.coarse)
    if dcoarse is not None:
        dcoarse = np.asarray(dcoarse, dtype=np.float64)
        if dcoarse.shape != tr.coarse.shape:
            raise StructuralError(f"coarse gradient {dcoarse.shape} != coarse logits {tr.coarse.shape}")
        dLc += dcoarse
    if dtail is not None:
        if tr.tail_logits is None:
            raise StructuralError("tail gradient given but trace has no tail branch")
        dtail = np.asarray(dtail, dtype=np.float64)
        if dtail.shape != tr.tail_logits.shape:
            raise StructuralError(f"tail gradient {dtail.shape} != tail logits {tr.tail_logits.shape}")
        rg, dfeat, dprob = refine_backward(tr.refine_cache, dtail, params["refine"])
        g["refine"] = rg
        np.add.at(dFc, tr.tail, dfeat)
        dP = np.zeros_like(tr.coarse)
        np.add.at(dP, tr.tail, dprob)
        P = tr.coarse
        dLc += P * (dP - (dP * P).sum(axis=1, keepdims=True))
    if dcoarse is not None or dtail is not None:
        g["coarse"]["W"] = tr.E.T @ dLc
        g["coarse"]["b"] = dLc.sum(axis=0)
        dE += dLc @ params["coarse"]["W"].T

    sel = tr.sel
    dR = dFc[sel]
    dFc[sel] = 0.0
    dE += dFc

    f = params["ffn"]
    hact = np.maximum(tr.hpre, 0.0)
    g["ffn"]["W2"] = hact.T @ dR
    g["ffn"]["b2"] = dR.sum(axis=0)
    dhpre = (dR @ f["W2"].T) * (tr.hpre > 0)
    g["ffn"]["W1"] = tr.Y.T @ dhpre
    g["ffn"]["b1"] = dhpre.sum(axis=0)
    dY = dR + dhpre @ f["W1"].T
    np.add.at(dE, sel, dY)

    at = params["attention"]
    Qb = params["queries"]["Q"]
    H = arch.num_heads
    scale = 1.0 / math.sqrt(arch.d_model)
    dQb = np.zeros_like(Qb)
    for h in range(H):
        A, O, V, Q, K = tr.A[h], tr.O[h], tr.V[h], tr.Q[h], tr.K[h]
        dA = np.zeros_like(A)
        dA[:, sel] += (O @ dY.T) / H
        dO = (A[:, sel] @ dY) / H
        dA += dO @ V.T
        dV = A.T @ dO
        dS = A * (dA - (dA * A).sum(axis=1, keepdims=True)) * scale
        dQ = dS @ K
        dK = dS.T @ Q
        g["attention"]["WQ"][h] = Qb.T @ dQ
        g["attention"]["WK"][h] = tr.E.T @ dK
        g["attention"]["WV"][h] = tr.E.T @ dV
        dQb += dQ @ at["WQ"][h].T
        dE += dK @ at["WK"][h].T + dV @ at["WV"][h].T
    g["queries"]["Q"] = dQb

    g["encoder"]["W"] = tr.X.T @ dE
    g["encoder"]["b"] = dE.sum(axis=0)

    for name, frozen in params.freeze_mask.items():
        if frozen:
            g[name] = {k: np.zeros_like(v) for k, v in params[name].items()}
    return g


def sgd_step(params: ToyDecoderParams, grads: Mapping, lr: float) -> ToyDecoderParams:
    """Plain SGD on unfrozen groups; frozen groups keep the very same arrays."""
    if not lr > 0:
        raise ValueError(f"learning rate must be > 0, got {lr}")
    for gname in params.trainable():
        for k, v in grads[gname].items():
            if not np.isfinite(v).all():
                raise NumericError(f"non-finite gradient in {gname}.{k}; step aborted")
    new = {}
    for gname in GROUPS:
        if params.freeze_mask[gname]:
            new[gname] = params.groups[gname]
        else:
            new[gname] = {k: v - lr * grads[gname][k] for k, v in params.groups[gname].items()}
    return replace(params, groups=new)


def set_freeze(params: ToyDecoderParams, groups_to_freeze: Iterable[str]) -> ToyDecoderParams:
    """Freeze exactly ``groups_to_freeze``; every other group becomes trainable."""
    frozen = set(groups_to_freeze)
    unknown = frozen - set(GROUPS)
    if unknown:
        raise ValueError(f"unknown parameter groups: {sorted(unknown)}")
    return replace(params, freeze_mask={g: g in frozen for g in GROUPS})
