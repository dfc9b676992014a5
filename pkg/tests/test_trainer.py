from dataclasses import replace

import numpy as np
import pytest

from shtocc import toynet
from shtocc.errors import ConfigError, StructuralError
from shtocc.losses import cross_entropy
from shtocc.synth import SceneConfig, class_embeddings, generate_scene
from shtocc.tail import derive_taxonomy
from shtocc.trainer import (Scene, TrainConfig, TrainingAborted, choose_voxels, evaluate, phase1_train, phase2_retrain_head,
                            selection_schedule, train)
from shtocc.voxel_core import GridDims, sparsify

SMALL = SceneConfig(dims=GridDims(12, 12, 4), frequencies=(0.4, 0.2, 0.15, 0.1, 0.09, 0.03, 0.03),
                    blob_threshold=0.05, blob_size=(2, 4))


def scenes(n, base=0, cfg=SMALL):
    return [Scene(f, l) for l, f in (generate_scene(cfg.with_seed(base + i)) for i in range(n))]


def quick(**kw):
    return TrainConfig(**{"phase1_epochs": 2, "phase2_epochs": 2, "d_model": 6, "num_queries": 3,
                          "ffn_hidden": 8, "tail_threshold": 0.05, **kw})


def fresh(cfg, sc, tax):
    arch = cfg.arch(sc[0].features.channels, tax.num_classes)
    return toynet.init_params(arch, np.random.default_rng(cfg.seed))


def same_params(a, b, groups=toynet.GROUPS):
    return all(a[g][k].tobytes() == b[g][k].tobytes() for g in groups for k in a[g])


@pytest.fixture(scope="module")
def data():
    sc = scenes(3)
    return sc, derive_taxonomy([s.labels for s in sc], 0.05)


def test_selection_schedule():
    assert selection_schedule(5, 1, 2.0) == [5]
    assert selection_schedule(8, 3, 2.0) == [8, 16, 32]
    assert selection_schedule(7, 4, 1.0) == [7, 7, 7, 7]
    assert selection_schedule(3, 3, 1.5) == [3, 5, 7]
    with pytest.raises(ValueError):
        selection_schedule(8, 3, 0.5)
    with pytest.raises(ValueError):
        selection_schedule(0, 1, 1.0)


def test_config_errors_name_field():
    with pytest.raises(ConfigError, match="head_fraction"):
        TrainConfig(head_fraction=0.0)
    with pytest.raises(ConfigError, match="growth"):
        TrainConfig(growth=0.9)
    with pytest.raises(ConfigError, match="phase1_epochs"):
        TrainConfig(phase1_epochs=-1)
    with pytest.raises(ConfigError, match="tail_loss"):
        TrainConfig(tail_selection=False)


def test_zero_epochs_leaves_params(data):
    sc, tax = data
    cfg = quick(phase1_epochs=0, phase2_epochs=0)
    p = fresh(cfg, sc, tax)
    q, lg = phase1_train(cfg, sc, tax, p)
    assert same_params(p, q) and len(lg) == 0
    r, lg = phase2_retrain_head(cfg, p, sc, tax)
    assert same_params(p, r) and len(lg) == 0


def test_zero_learning_rate_logs_losses(data):
    sc, tax = data
    cfg = quick(phase1_epochs=1, lr1=0.0)
    p = fresh(cfg, sc[:1], tax)
    q, lg = phase1_train(cfg, sc[:1], tax, p)
    assert same_params(p, q)
    rec = lg.records[0]
    assert rec["baseline"] > 0 and rec["tvl"] > 0 and rec["total"] == rec["baseline"] + rec["tvl"]


def test_empty_scene_list():
    with pytest.raises(ValueError):
        phase1_train(quick(), [], None, None)


def test_mismatched_scenes(data):
    sc, tax = data
    other = scenes(1, cfg=replace(SMALL, dims=GridDims(8, 8, 4)))
    with pytest.raises(StructuralError):
        train(quick(), sc + other, tax)


def test_bookkeeping_and_budgets(data):
    sc, tax = data
    _, _, lg = train(quick(phase1_epochs=3), sc, tax)
    p1 = [r for r in lg.records if r["phase"] == 1]
    assert len(p1) == 3
    for r in p1:
        assert abs(r["total"] - (r["baseline"] + r["tvl"])) <= 1e-12
        assert r["tail_selected"] == r["head_selected"] > 0
    assert all(r["ls"] is not None for r in lg.records if r["phase"] == 2)


def test_freeze_contract(data):
    sc, tax = data
    for kw in ({}, {"epsilon": 0.3, "smooth_classes": "head"}, {"phase2_sampling": "head_tail"}):
        p1, p2, _ = train(quick(**kw), sc, tax)
        others = [g for g in toynet.GROUPS if g != "seg_head"]
        assert same_params(p1, p2, others)
        assert not same_params(p1, p2, ["seg_head"])
        assert p1.freeze_mask == p2.freeze_mask


def test_phase2_without_smoothing_is_plain_ce_finetune(data):
    sc, tax = data
    cfg = quick(epsilon=0.0, lr1=0.1, lr2=0.1, phase2_epochs=3)
    p1, p2, _ = train(cfg, sc, tax)
    # reference: completed features from the frozen network, plain CE on the head
    feats, labels = [], []
    for s in sc:
        vox = sparsify(s.features, s.labels)
        tr = toynet.encode(p1, vox)
        sel = choose_voxels(cfg, tr, vox.coords, tax)
        toynet.decode(p1, tr, sel.refine_idx)
        feats.append(tr.completed)
        labels.append(s.labels.labels[s.labels.dims.linear_index(vox.coords)])
    W, b = p1["seg_head"]["W"].copy(), p1["seg_head"]["b"].copy()
    for _ in range(3):
        for F, y in zip(feats, labels):
            _, g = cross_entropy(F @ W + b, y)
            W, b = W - 0.1 * (F.T @ g), b - 0.1 * g.sum(axis=0)
    np.testing.assert_array_equal(p2["seg_head"]["W"], W)
    np.testing.assert_array_equal(p2["seg_head"]["b"], b)


def test_reproducible(data):
    sc, tax = data
    a = train(quick(seed=5), sc, tax)
    b = train(quick(seed=5), sc, tax)
    assert a[2].records == b[2].records and same_params(a[1], b[1])
    c = train(quick(seed=6), sc, tax)
    assert c[2].records != a[2].records


def test_total_loss_decreases_in_pilot_runs():
    # pilot: 4 default scenes per seed, 10 epochs; lr1=0.01 decreases monotonically for all
    # five seeds, larger steps oscillate once the tail selection starts moving
    passed = 0
    for s in range(5):
        sc = [Scene(f, l) for l, f in (generate_scene(SceneConfig().with_seed(1000 * s + i)) for i in range(4))]
        tax = derive_taxonomy([x.labels for x in sc])
        _, lg = phase1_train(TrainConfig(seed=s, phase1_epochs=10, lr1=0.01), sc, tax,
                             fresh(TrainConfig(seed=s), sc, tax))
        totals = [r["total"] for r in lg.records]
        passed += all(b < a for a, b in zip(totals, totals[1:]))
    assert passed >= 4


def test_evaluate_oracle_params_perfect():
    cfg = replace(SMALL, noise=0.0)
    sc = scenes(2, cfg=cfg)
    tax = derive_taxonomy([s.labels for s in sc], 0.05)
    arch = toynet.Arch(cfg.feature_channels, cfg.num_classes, d_model=cfg.feature_channels,
                       num_queries=2, num_heads=1, ffn_hidden=2)
    p = toynet.nearest_centroid_params(arch, class_embeddings(cfg))
    rep = evaluate(p, sc, tax)
    assert rep.miou == 1.0 and rep.tail_miou == 1.0


def test_evaluate_random_params_near_chance():
    cfg = SceneConfig(dims=GridDims(12, 12, 4), num_classes=3, frequencies=(0.5, 0.5))
    sc = scenes(2, cfg=cfg)
    tax = derive_taxonomy([s.labels for s in sc])
    tc = quick()
    p = fresh(tc, sc, tax)
    rep = evaluate(p, sc, tax, tc)
    # ten-seed pilot ranged 0.0 to 0.37; a constant single-class guess scores 0.25
    assert 0.0 < rep.miou < 0.5
    again = evaluate(p, sc, tax, tc)
    assert again.per_class_iou == rep.per_class_iou and again.miou == rep.miou


def test_evaluate_is_read_only(data):
    sc, tax = data
    p = fresh(quick(), sc, tax)
    before = {g: {k: v.copy() for k, v in p[g].items()} for g in toynet.GROUPS}
    evaluate(p, sc, tax, quick())
    assert all(np.array_equal(before[g][k], p[g][k]) for g in toynet.GROUPS for k in p[g])


def test_divergence_aborts_with_finite_last_good(data):
    sc, tax = data
    cfg = quick(lr1=1e150)
    with pytest.raises(TrainingAborted) as exc:
        phase1_train(cfg, sc, tax, fresh(cfg, sc, tax))
    last = exc.value.last_good
    assert all(np.isfinite(v).all() for g in toynet.GROUPS for v in last[g].values())
