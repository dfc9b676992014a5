import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import ce_mp, smoothed_ce_mp
from shtocc.errors import NumericError
from shtocc.losses import (LossValue, SmoothingConfig, cross_entropy, label_smoothing_loss,
                           smoothed_targets, tail_voxel_loss, total_loss)


def numeric_logit_grad(fn, logits, h=1e-5):
    g = np.zeros_like(logits)
    for idx in np.ndindex(*logits.shape):
        up, down = logits.copy(), logits.copy()
        up[idx] += h
        down[idx] -= h
        g[idx] = (fn(up) - fn(down)) / (2 * h)
    return g


def test_ce_confident_and_uniform():
    logits = np.zeros((3, 4))
    labels = np.array([0, 2, 3])
    logits[np.arange(3), labels] = 20.0
    assert cross_entropy(logits, labels)[0].value < 1e-6
    assert cross_entropy(np.zeros((5, 4)), np.array([0, 1, 2, 3, 1]))[0].value == pytest.approx(math.log(4), abs=1e-15)


def test_ce_matches_high_precision():
    rng = np.random.default_rng(0)
    logits, labels = rng.normal(size=(8, 5)) * 3, rng.integers(0, 5, 8)
    ref = mpmath.fsum(ce_mp(logits[i], labels[i]) for i in range(8)) / 8
    assert cross_entropy(logits, labels)[0].value == pytest.approx(float(ref), abs=1e-12)
    w = rng.random(8) + 0.5
    ref = mpmath.fsum(ce_mp(logits[i], labels[i], mpmath.mpf(w[i])) for i in range(8)) / mpmath.fsum(map(mpmath.mpf, w))
    assert cross_entropy(logits, labels, w)[0].value == pytest.approx(float(ref), abs=1e-12)


def test_ce_errors():
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((2, 3)), np.array([0, 3]))
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((0, 3)), np.array([], int))
    with pytest.raises(NumericError):
        cross_entropy(np.array([[np.nan, 0.0]]), np.array([0]))


def test_ce_stable_for_huge_logits():
    v, g = cross_entropy(np.array([[1e4, -1e4, 0.0]]), np.array([1]))
    assert v.value == pytest.approx(2e4) and np.isfinite(g).all()


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(2, 6), st.booleans(), st.integers(0, 2**32 - 1))
def test_ce_gradient(n, C, weighted, seed):
    rng = np.random.default_rng(seed)
    logits, labels = rng.normal(size=(n, C)) * 2, rng.integers(0, C, n)
    w = rng.random(n) + 0.1 if weighted else None
    _, g = cross_entropy(logits, labels, w)
    num = numeric_logit_grad(lambda z: cross_entropy(z, labels, w)[0].value, logits)
    np.testing.assert_allclose(g, num, rtol=1e-4, atol=1e-8)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(2, 6), st.integers(0, 2**32 - 1))
def test_ce_nonnegative(n, C, seed):
    rng = np.random.default_rng(seed)
    assert cross_entropy(rng.normal(size=(n, C)) * 5, rng.integers(0, C, n))[0].value >= 0


def test_tvl_examples():
    logits = np.full((2, 4), -30.0)
    logits[[0, 1], [2, 3]] = 30.0
    assert tail_voxel_loss(logits, np.array([2, 3]), np.array([1, 2]))[0].value < 1e-12
    assert tail_voxel_loss(np.zeros((1, 4)), np.array([1]), np.array([3]))[0].value == pytest.approx(math.log(4))
    rng = np.random.default_rng(1)
    z = rng.normal(size=(2, 5))
    a = tail_voxel_loss(z, np.array([1, 4]), np.array([2, 1]))[0].value
    b = cross_entropy(z[[0, 0, 1]], np.array([1, 1, 4]))[0].value
    assert a == pytest.approx(b, abs=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(2, 6), st.integers(0, 2**32 - 1))
def test_tvl_equals_expanded_rows(n, C, seed):
    rng = np.random.default_rng(seed)
    z, y, m = rng.normal(size=(n, C)), rng.integers(0, C, n), rng.integers(1, 5, n)
    rows = np.repeat(np.arange(n), m)
    v, g = tail_voxel_loss(z, y, m)
    v2, g2 = cross_entropy(z[rows], y[rows])
    assert abs(v.value - v2.value) <= 1e-12
    # expanded gradient summed back per original row
    back = np.zeros_like(z)
    np.add.at(back, rows, g2)
    np.testing.assert_allclose(g, back, atol=1e-15)


def test_total_loss_is_plain_sum():
    base, tvl = LossValue(1.25), LossValue(0.5)
    assert total_loss(base, tvl).value == 1.75
    assert total_loss(base, LossValue(0.0)).value == 1.25
    assert total_loss(LossValue(0.0), tvl).value == 0.5
    assert total_loss(base, tvl, tvl_weight=2.0).value == 2.25
    with pytest.raises(NumericError):
        LossValue(float("inf"))


def test_smoothed_targets_examples():
    np.testing.assert_array_equal(smoothed_targets(1, 3, SmoothingConfig(0.0)), [0, 1, 0])
    np.testing.assert_allclose(smoothed_targets(2, 4, SmoothingConfig(0.1)), [1 / 30, 1 / 30, 0.9, 1 / 30],
                               rtol=1e-15)
    with pytest.raises(ValueError):
        smoothed_targets(0, 1, SmoothingConfig(0.1))
    with pytest.raises(ValueError):
        SmoothingConfig(1.0)


def test_per_class_smoothing():
    cfg = SmoothingConfig((0.0, 0.2, 0.0))
    np.testing.assert_allclose(smoothed_targets(1, 3, cfg), [0.1, 0.8, 0.1])
    np.testing.assert_array_equal(smoothed_targets(2, 3, cfg), [0, 0, 1])
    with pytest.raises(ValueError):
        cfg.per_class(4)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 64), st.sampled_from([0.0, 0.05, 0.1, 0.3]), st.data())
def test_smoothed_targets_sum_to_one(C, eps, data):
    label = data.draw(st.integers(0, C - 1))
    assert abs(smoothed_targets(label, C, SmoothingConfig(eps)).sum() - 1.0) <= 1e-12


def test_ls_zero_eps_is_ce_bitwise():
    rng = np.random.default_rng(2)
    z, y = rng.normal(size=(16, 7)) * 4, rng.integers(0, 7, 16)
    a, ga = label_smoothing_loss(z, y, SmoothingConfig(0.0))
    b, gb = cross_entropy(z, y)
    assert a.value == b.value
    assert np.array_equal(ga, gb)


def test_ls_uniform_logits_is_log_c():
    for eps in (0.0, 0.1, 0.3):
        v = label_smoothing_loss(np.zeros((3, 4)), np.array([0, 1, 3]), SmoothingConfig(eps))[0].value
        assert v == pytest.approx(math.log(4), abs=1e-15)


def test_ls_matches_high_precision():
    rng = np.random.default_rng(3)
    z, y = rng.normal(size=(8, 5)) * 2, rng.integers(0, 5, 8)
    ref = mpmath.fsum(smoothed_ce_mp(z[i], y[i], 0.1) for i in range(8)) / 8
    assert label_smoothing_loss(z, y, SmoothingConfig(0.1))[0].value == pytest.approx(float(ref), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(2, 6), st.floats(0.0, 0.5), st.integers(0, 2**32 - 1))
def test_ls_gradient(n, C, eps, seed):
    rng = np.random.default_rng(seed)
    z, y = rng.normal(size=(n, C)), rng.integers(0, C, n)
    cfg = SmoothingConfig(eps)
    _, g = label_smoothing_loss(z, y, cfg)
    num = numeric_logit_grad(lambda q: label_smoothing_loss(q, y, cfg)[0].value, z)
    np.testing.assert_allclose(g, num, rtol=1e-4, atol=1e-8)


def test_ls_minimum_at_smoothed_targets():
    C, eps = 5, 0.2
    y = np.array([0, 3, 4])
    t = np.stack([smoothed_targets(int(c), C, SmoothingConfig(eps)) for c in y])
    _, g = label_smoothing_loss(np.log(t), y, SmoothingConfig(eps))
    assert np.abs(g).max() < 1e-15
