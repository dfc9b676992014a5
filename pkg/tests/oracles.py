"""Independent reference implementations used by the tests.

Everything here is written with plain Python loops, full sorts or mpmath so
that it shares no code path with the package under test.
"""

from __future__ import annotations

from fractions import Fraction

import mpmath
import numpy as np

from shtocc import toynet
from shtocc.losses import cross_entropy, label_smoothing_loss, SmoothingConfig

mpmath.mp.dps = 50


# ---------------------------------------------------------------- selection

def head_oracle(weights, coords, k):
    """Full sort of keys by (max attention desc, key index asc)."""
    L, S = len(weights), len(weights[0])
    best = []
    for j in range(S):
        col = [weights[i][j] for i in range(L)]
        m = max(col)
        best.append((m, col.index(m)))
    order = sorted(range(S), key=lambda j: (-best[j][0], j))[:k]
    return [tuple(coords[j]) for j in order], [best[j][0] for j in order], order


def tail_oracle(probs, coords, tail_set, budget, exclude=()):
    """Top-1 pool, then top-2 pool, then cyclic repetition, full sorts throughout."""
    n = len(probs)
    excluded = {tuple(c) for c in exclude}
    score = [max(probs[i][c] for c in tail_set) for i in range(n)]

    def ranked(pool):
        return sorted(pool, key=lambda i: (-score[i], coords[i][2], coords[i][1], coords[i][0]))

    first, second = [], []
    for i in range(n):
        if tuple(coords[i]) in excluded:
            continue
        order = sorted(range(len(probs[i])), key=lambda c: (-probs[i][c], c))
        if order[0] in tail_set:
            first.append(i)
        elif len(order) > 1 and order[1] in tail_set:
            second.append(i)
    chosen = ranked(first)[:budget]
    if len(chosen) < budget:
        chosen += ranked(second)[: budget - len(chosen)]
    if not chosen:
        pool = [i for i in range(n) if tuple(coords[i]) not in excluded] or list(range(n))
        chosen = ranked(pool)[:budget]
    counts = [0] * len(chosen)
    for t in range(budget):
        counts[t % len(chosen)] += 1
    return chosen, counts


# ---------------------------------------------------------------- metrics

def iou_oracle(pred, gt):
    """Per-class IoU over voxels with gt != 0 via explicit index sets."""
    keep = [i for i, g in enumerate(gt) if g != 0]
    classes = {gt[i] for i in keep} | {pred[i] for i in keep}
    classes.discard(0)
    out = {}
    for c in classes:
        p = {i for i in keep if pred[i] == c}
        g = {i for i in keep if gt[i] == c}
        out[c] = Fraction(len(p & g), len(p | g))
    return out


# ---------------------------------------------------------------- losses

def ce_mp(logits, label, weight=1):
    """-log softmax(logits)[label] at 50 digits."""
    z = [mpmath.mpf(float(v)) for v in logits]
    lse = mpmath.log(mpmath.fsum(mpmath.exp(v) for v in z))
    return weight * (lse - z[label])


def smoothed_ce_mp(logits, label, eps):
    z = [mpmath.mpf(float(v)) for v in logits]
    C = len(z)
    lse = mpmath.log(mpmath.fsum(mpmath.exp(v) for v in z))
    e = mpmath.mpf(eps)
    total = mpmath.mpf(0)
    for c in range(C):
        t = 1 - e if c == label else e / (C - 1)
        total += t * (lse - z[c])
    return total


# ---------------------------------------------------------------- gradients

def total_objective(params, X, labels, refine_idx, tail_idx, tail_labels, mult):
    """Baseline CE (segmentation + coarse) plus tail voxel loss, and its analytic gradient."""
    R, _, _, tr = toynet.forward(params, X, refine_idx, tail_idx)
    seg, gseg = cross_entropy(tr.logits, labels)
    coarse, gco = cross_entropy(tr.coarse_logits, labels)
    tvl, gtail = cross_entropy(tr.tail_logits, tail_labels, weights=mult)
    value = seg.value + coarse.value + tvl.value
    return value, (tr, gseg, gtail, gco)


def ls_objective(params, X, labels, refine_idx, eps):
    _, _, _, tr = toynet.forward(params, X, refine_idx)
    ls, g = label_smoothing_loss(tr.logits, labels, SmoothingConfig(eps))
    return ls.value, (tr, g, None, None)


def random_decoder_instance(seed):
    """Small decoder with random sizes, inputs, refine subset and weighted tail rows."""
    rng = np.random.default_rng(seed)
    F, C = int(rng.integers(2, 5)), int(rng.integers(3, 5))
    arch = toynet.Arch(F, C, int(rng.integers(3, 7)), int(rng.integers(1, 5)), int(rng.integers(1, 3)),
                       int(rng.integers(3, 7)))
    p = toynet.init_params(arch, rng)
    n = int(rng.integers(4, 12))
    X, y = rng.normal(size=(n, F)), rng.integers(0, C, n)
    ref = np.sort(rng.choice(n, int(rng.integers(1, n + 1)), replace=False))
    tail = rng.choice(n, int(rng.integers(1, n + 1)))
    mult = rng.integers(1, 4, tail.size)
    return p, X, y, ref, tail, y[tail], mult


def numeric_grad(fn, params, h=1e-6):
    """Central differences over every scalar parameter."""
    out = {}
    for g, arrays in params.groups.items():
        out[g] = {}
        for name, arr in arrays.items():
            grad = np.zeros_like(arr)
            flat = arr.reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + h
                up = fn(params)
                flat[i] = old - h
                down = fn(params)
                flat[i] = old
                grad.reshape(-1)[i] = (up - down) / (2 * h)
            out[g][name] = grad
    return out


def worst_violation(analytic, numeric, rel=1e-4, floor=1e-7):
    """Largest |a - n| / max(rel * |n|, floor) ratio; <= 1 means within tolerance."""
    worst = 0.0
    for g in numeric:
        for name in numeric[g]:
            a, n = analytic[g][name], numeric[g][name]
            bound = np.maximum(rel * np.abs(n), floor)
            worst = max(worst, float(np.max(np.abs(a - n) / bound)))
    return worst

