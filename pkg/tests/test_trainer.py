"""Optimizer contracts, method gating (inertness), divergence handling, and
the degenerate-dataset sanity run."""

import logging

import numpy as np
import pytest

from viewseg.autodiff import Tensor
from viewseg.data import GeneratorConfig, Recording, SplitSpec, generate_synthetic
from viewseg.losses import LossWeights
from viewseg.trainer import (AdamState, TrainConfig, TrainingDiverged, adam_step,
                             train)


def test_adam_zero_grad_keeps_params():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    state = AdamState.for_params([p])
    assert adam_step([p], [np.zeros(2)], state, lr=0.1)
    assert np.array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_is_signed_lr():
    g = np.array([0.3, -1.7, 4.0])
    p = Tensor(np.zeros(3), requires_grad=True)
    state = AdamState.for_params([p])
    adam_step([p], [g], state, lr=1e-3)
    # bias-corrected first step: -lr * g / (|g| + eps) ~ -lr * sign(g)
    assert np.allclose(p.data, -1e-3 * np.sign(g), atol=1e-6)


def test_adam_identical_grads_update_identically():
    p1 = Tensor(np.full(2, 0.5), requires_grad=True)
    p2 = Tensor(np.full(2, 0.5), requires_grad=True)
    state = AdamState.for_params([p1, p2])
    g = np.array([0.2, -0.4])
    for _ in range(5):
        adam_step([p1, p2], [g.copy(), g.copy()], state, lr=1e-2)
    assert np.array_equal(p1.data, p2.data)


def test_adam_skips_nonfinite_gradients(caplog):
    p = Tensor(np.ones(2), requires_grad=True)
    state = AdamState.for_params([p])
    with caplog.at_level(logging.WARNING):
        ok = adam_step([p], [np.array([np.nan, 1.0])], state, lr=0.1)
    assert not ok
    assert np.array_equal(p.data, [1.0, 1.0])
    assert state.step_count == 0
    assert any("skipped" in rec.message for rec in caplog.records)


def bench_dataset(seed=3):
    cfg = GeneratorConfig(num_sequences=6, num_classes=3, feature_dim=6,
                          seen_views=2, unseen_view_groups={"unseen_a": 1},
                          mean_segments=4, duration_range=(5, 10),
                          noise_sigma=0.3, view_distortion=0.4, seed=seed)
    recordings, split, _ = generate_synthetic(cfg)
    return recordings, split


def quick_config(**kw):
    defaults = dict(epochs=2, steps_per_epoch=5, learning_rate=1e-3,
                    seed=9, embed_dim=6, num_stages=1, layers_per_stage=2)
    defaults.update(kw)
    return TrainConfig(**defaults)


def params_bytes(state):
    return {name: t.data.tobytes() for name, t in state.params.items()}


def test_method_validation():
    with pytest.raises(ValueError):
        TrainConfig(method="fancy")
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)


def test_resolved_weights_force_method_consistency():
    w = LossWeights(lam=0.5, beta=0.2)
    assert TrainConfig(method="baseline", weights=w).resolved_weights().lam == 0.0
    assert TrainConfig(method="baseline", weights=w).resolved_weights().beta == 0.0
    r = TrainConfig(method="ours_no_seq", weights=w).resolved_weights()
    assert (r.lam, r.beta) == (0.0, 0.2)
    r = TrainConfig(method="ours_no_action", weights=w).resolved_weights()
    assert (r.lam, r.beta) == (0.5, 0.0)
    r = TrainConfig(method="ours", weights=w).resolved_weights()
    assert (r.lam, r.beta) == (0.5, 0.2)


def test_training_is_deterministic():
    recordings, split = bench_dataset()
    s1, l1 = train(quick_config(method="ours"), recordings, split)
    s2, l2 = train(quick_config(method="ours"), recordings, split)
    assert params_bytes(s1) == params_bytes(s2)
    assert [(e.tas, e.seq, e.action) for e in l1.epochs] == \
        [(e.tas, e.seq, e.action) for e in l2.epochs]


def test_ours_with_zero_weights_matches_baseline_bitwise():
    recordings, split = bench_dataset()
    cfg_base = quick_config(method="baseline", epochs=3)
    cfg_inert = quick_config(method="ours", epochs=3,
                             weights=LossWeights(lam=0.0, beta=0.0))
    s1, l1 = train(cfg_base, recordings, split)
    s2, l2 = train(cfg_inert, recordings, split)
    assert params_bytes(s1) == params_bytes(s2)
    assert [e.tas for e in l1.epochs] == [e.tas for e in l2.epochs]


def test_baseline_loss_is_pure_tas():
    recordings, split = bench_dataset()
    _, log = train(quick_config(method="baseline"), recordings, split)
    for e in log.epochs:
        assert e.seq == 0.0 and e.action == 0.0 and e.aux == 0.0


def test_all_methods_run_and_log_finite_components():
    recordings, split = bench_dataset()
    for method in ("ours_no_seq", "ours_no_action", "advloss", "contrastive"):
        cfg = quick_config(method=method, contrastive_batch=3)
        _, log = train(cfg, recordings, split)
        for e in log.epochs:
            assert np.isfinite([e.tas, e.seq, e.action, e.aux]).all()
        if method == "advloss" or method == "contrastive":
            assert any(e.aux != 0.0 for e in log.epochs)


def test_degenerate_dataset_reaches_high_seen_accuracy():
    cfg = GeneratorConfig(num_sequences=6, num_classes=3, feature_dim=6,
                          seen_views=2, unseen_view_groups={"unseen_a": 1},
                          mean_segments=4, duration_range=(5, 10),
                          noise_sigma=0.0, view_distortion=0.0, seed=4)
    recordings, split, _ = generate_synthetic(cfg)
    tcfg = TrainConfig(method="baseline", epochs=5, steps_per_epoch=30,
                       learning_rate=5e-3, seed=0, embed_dim=8,
                       num_stages=1, layers_per_stage=3)
    _, log = train(tcfg, recordings, split)
    assert log.final_report().groups["seen"].acc >= 99.0


def test_training_aborts_on_nonfinite_input():
    recordings, split = bench_dataset()
    poisoned = [Recording(r.sequence_id, r.view_id,
                          np.where(np.isfinite(r.features), r.features, 0.0),
                          r.labels) for r in recordings]
    poisoned[0].features[0, 0] = np.nan
    with pytest.raises(TrainingDiverged):
        train(quick_config(), poisoned, split)


def test_sync_shift_changes_trajectory_but_stays_finite():
    recordings, split = bench_dataset()
    s_plain, _ = train(quick_config(method="ours"), recordings, split)
    s_shift, log = train(quick_config(method="ours", sync_shift=3), recordings, split)
    assert params_bytes(s_plain) != params_bytes(s_shift)
    assert all(np.isfinite(e.tas) for e in log.epochs)


def test_train_rejects_datasets_without_pairs():
    recordings, split = bench_dataset()
    only_one_seen = SplitSpec({0}, {"unseen_a": {2}})
    with pytest.raises(ValueError):
        train(quick_config(), recordings, only_one_seen)
    with pytest.raises(ValueError):
        train(quick_config(), [], split)


def test_eval_every_produces_snapshots():
    recordings, split = bench_dataset()
    _, log = train(quick_config(epochs=4, eval_every=2), recordings, split)
    have = [e.epoch for e in log.epochs if e.report is not None]
    assert have == [1, 3]
