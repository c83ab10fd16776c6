"""Model and trainer tests: hand-derived backprop vs finite differences,
Adam single-step oracle, bit-reproducible training, checkpoint round-trips."""

import dataclasses

import numpy as np
import pytest

from dghm.harmonizer import FocalParams, HarmonizerConfig, LossSpec, Mode, Partition
from dghm.losses import SceParams
from dghm.model import (
    AdamState,
    Batch,
    Predictor,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    backward,
    batch_loss_and_grads,
    finite_difference_check,
    forward,
    load_checkpoint,
    pool_gradient_histograms,
    save_checkpoint,
    save_training_log_csv,
    train,
)
from dghm.simdata import CorruptionSpec, SceneSpec, build_pool, corrupt_annotations, generate_corpus

ALL_SPECS = [
    LossSpec(kind="ce"),
    LossSpec(kind="focal", focal=FocalParams(alpha=0.25, gamma=2.0)),
    LossSpec(kind="sce", sce=SceParams()),
    LossSpec(kind="ghm_c"),
    LossSpec(kind="dghm_c"),
    LossSpec(kind="dghm_c_star"),
]


def random_batch(rng, n, dim, all_negative=False):
    a = (rng.uniform(size=n) < 0.7).astype(np.int64)
    p_star = np.where(a == 1, (rng.uniform(size=n) < 0.5).astype(np.int64), 0)
    if all_negative:
        p_star = np.zeros(n, dtype=np.int64)
    return Batch(
        features=rng.normal(size=(n, dim)),
        p_star=p_star,
        a=a,
        targets=rng.normal(size=(n, 4)) * 0.5,
        is_positive=p_star == 1,
    )


# ---------------------------------------------------------------------------
# forward / backward basics
# ---------------------------------------------------------------------------


def test_zero_output_layer_gives_half_probability():
    model = Predictor.create(6, hidden=(8,), seed=0)
    logits, offsets, _ = forward(model, np.random.default_rng(0).normal(size=(5, 6)))
    np.testing.assert_array_equal(logits, 0.0)
    np.testing.assert_array_equal(offsets, 0.0)


def test_forward_deterministic_and_batched():
    model = Predictor.create(4, hidden=(8, 8), seed=1)
    # nonzero output layer so the test is not vacuous
    model.weights[-1] += 0.3
    x = np.random.default_rng(2).normal(size=(6, 4))
    l1, o1, _ = forward(model, x)
    l2, o2, _ = forward(model, x)
    np.testing.assert_array_equal(l1, l2)
    for i in range(6):
        li, oi, _ = forward(model, x[i])
        assert li[0] == pytest.approx(l1[i], abs=1e-15)
        np.testing.assert_allclose(oi[0], o1[i], atol=1e-15)


def test_forward_dim_mismatch():
    model = Predictor.create(4)
    with pytest.raises(ValueError):
        forward(model, np.zeros((2, 5)))


def test_zero_beta_zero_classification_gradient():
    rng = np.random.default_rng(3)
    model = Predictor.create(5, hidden=(6,), seed=3)
    batch = random_batch(rng, 12, 5, all_negative=True)
    logits, offsets, cache = forward(model, batch.features)
    gw, gb = backward(model, cache, np.zeros_like(logits), np.zeros_like(offsets))
    for g in gw + gb:
        np.testing.assert_array_equal(g, 0.0)


def test_no_positives_zero_regression_gradient():
    rng = np.random.default_rng(4)
    model = Predictor.create(5, hidden=(6,), seed=4)
    model.weights[-1] += rng.normal(size=model.weights[-1].shape) * 0.1
    batch = random_batch(rng, 12, 5, all_negative=True)
    loss_with, gw, _ = batch_loss_and_grads(model, batch, LossSpec(kind="ce"),
                                            reg_weight=1.0)
    loss_without, gw0, _ = batch_loss_and_grads(model, batch, LossSpec(kind="ce"),
                                                reg_weight=0.0)
    assert loss_with == pytest.approx(loss_without)
    for a, b in zip(gw, gw0):
        np.testing.assert_allclose(a, b, atol=1e-15)


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("spec", ALL_SPECS, ids=lambda s: s.kind)
def test_finite_difference_small_model(spec):
    rng = np.random.default_rng(10)
    model = Predictor.create(6, hidden=(8,), seed=10)
    for w in model.weights:
        w += rng.normal(size=w.shape) * 0.2
    batch = random_batch(rng, 24, 6)
    err = finite_difference_check(model, batch, spec)
    assert err < 1e-6


def test_finite_difference_regression_head_only():
    rng = np.random.default_rng(11)
    model = Predictor.create(4, hidden=(6,), seed=11)
    for w in model.weights:
        w += rng.normal(size=w.shape) * 0.3
    batch = random_batch(rng, 16, 4)
    err = finite_difference_check(model, batch, LossSpec(kind="ce"), reg_weight=2.5)
    assert err < 1e-6


def test_finite_difference_subsamples_large_models():
    rng = np.random.default_rng(12)
    model = Predictor.create(40, hidden=(64,), seed=12)  # > 1000 parameters
    batch = random_batch(rng, 8, 40)
    err = finite_difference_check(model, batch, LossSpec(kind="ce"), max_params=50)
    assert err < 1e-6


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


def test_adam_zero_gradient_fixed_point():
    model = Predictor.create(3, hidden=(4,), seed=0)
    before = [p.copy() for p in model.weights + model.biases]
    state = AdamState.for_model(model)
    zeros_w = [np.zeros_like(w) for w in model.weights]
    zeros_b = [np.zeros_like(b) for b in model.biases]
    adam_step(model, state, zeros_w, zeros_b, lr=0.1)
    for p, q in zip(model.weights + model.biases, before):
        np.testing.assert_array_equal(p, q)


def test_adam_single_step_closed_form():
    # from zero moments, one step moves each coordinate by
    #   lr * g / (|g| + eps * sqrt(1 - beta2))  ~= lr * sign(g)
    model = Predictor.create(2, hidden=(2,), seed=0)
    state = AdamState.for_model(model)
    g = 0.37
    gw = [np.full_like(w, g) for w in model.weights]
    gb = [np.full_like(b, g) for b in model.biases]
    before = [p.copy() for p in model.weights + model.biases]
    adam_step(model, state, gw, gb, lr=0.01)
    m_hat, v_hat = g, g * g  # bias correction cancels the (1 - beta) factors
    expected_delta = 0.01 * m_hat / (np.sqrt(v_hat) + state.eps)
    for p, q in zip(model.weights + model.biases, before):
        np.testing.assert_allclose(q - p, expected_delta, rtol=1e-12)
    assert state.step == 1


def test_adam_two_runs_identical():
    rng = np.random.default_rng(5)
    models = []
    for _ in range(2):
        model = Predictor.create(3, hidden=(4,), seed=7)
        state = AdamState.for_model(model)
        rng_run = np.random.default_rng(99)
        for _ in range(10):
            gw = [rng_run.normal(size=w.shape) for w in model.weights]
            gb = [rng_run.normal(size=b.shape) for b in model.biases]
            adam_step(model, state, gw, gb, lr=0.01)
        models.append(model)
    for a, b in zip(models[0].weights + models[0].biases,
                    models[1].weights + models[1].biases):
        np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

TINY_SPEC = SceneSpec(extent=(24.0, 24.0), objects_per_ap_scene=(1, 2),
                      object_size=(6.0, 8.0), anchor_stride=4.0,
                      anchor_sizes=(7.0,))


def tiny_pool(eta=0.0, seed=0):
    scenes = generate_corpus(TINY_SPEC, 6, 2, seed=seed)
    corrupted, _ = corrupt_annotations(scenes, CorruptionSpec(eta=eta, seed=seed))
    return build_pool(corrupted, TINY_SPEC, corpus_seed=seed)


def test_zero_epochs_returns_initialization():
    pool = tiny_pool()
    cfg = TrainConfig(epochs=0, decay_epochs=(0, 0), steps_per_epoch=2, seed=3)
    model, log = train(pool, cfg)
    reference = Predictor.create(pool.features.shape[1], hidden=cfg.hidden, seed=3)
    for a, b in zip(model.weights + model.biases,
                    reference.weights + reference.biases):
        np.testing.assert_array_equal(a, b)
    assert log.epochs == []


def test_training_bit_reproducible():
    pool = tiny_pool(eta=0.4)
    cfg = TrainConfig(epochs=2, steps_per_epoch=5, batch_size=16,
                      learning_rate=1e-3, seed=11)
    m1, log1 = train(pool, cfg)
    m2, log2 = train(pool, cfg)
    for a, b in zip(m1.weights + m1.biases, m2.weights + m2.biases):
        np.testing.assert_array_equal(a, b)
    assert [r.mean_loss for r in log1.epochs] == [r.mean_loss for r in log2.epochs]


def test_training_learning_rate_schedule():
    pool = tiny_pool()
    cfg = TrainConfig(epochs=10, steps_per_epoch=1, learning_rate=1e-3, seed=0)
    assert cfg.decay_epochs == (6, 8)
    _, log = train(pool, cfg)
    lrs = [r.lr for r in log.epochs]
    assert lrs[5] == pytest.approx(1e-3)
    assert lrs[6] == pytest.approx(1e-4)
    assert lrs[8] == pytest.approx(1e-5)


def test_training_all_loss_kinds_run():
    pool = tiny_pool(eta=0.5)
    for spec in ALL_SPECS:
        cfg = TrainConfig(loss_spec=spec, epochs=1, steps_per_epoch=3,
                          batch_size=16, learning_rate=1e-3, seed=1)
        model, log = train(pool, cfg)
        assert np.isfinite(log.epochs[0].mean_loss)


def test_training_with_momentum_histograms():
    pool = tiny_pool(eta=0.5)
    spec = LossSpec(kind="dghm_c", harmonizer=HarmonizerConfig(momentum=0.9))
    cfg = TrainConfig(loss_spec=spec, epochs=1, steps_per_epoch=4,
                      batch_size=16, learning_rate=1e-3, seed=1)
    model, log = train(pool, cfg)
    assert np.isfinite(log.epochs[0].mean_loss)


def test_epoch_histogram_counts_sum_to_examples_seen():
    pool = tiny_pool(eta=0.5)
    cfg = TrainConfig(epochs=1, steps_per_epoch=4, batch_size=16,
                      learning_rate=1e-3, seed=2)
    _, log = train(pool, cfg)
    counts = sum(int(c.sum()) for c in log.epoch_histograms[0].values())
    assert counts == 4 * 16


def test_divergence_detected():
    pool = tiny_pool()
    pool.features[:, 0] = np.nan  # poisoned inputs produce a non-finite loss
    cfg = TrainConfig(epochs=2, steps_per_epoch=10, learning_rate=1e-3, seed=0)
    with pytest.raises(TrainingDiverged):
        train(pool, cfg)


def test_sanity_recall_on_separable_corpus():
    # noiseless, no hard anchors: CE should almost solve the task
    spec = dataclasses.replace(TINY_SPEC, noise_level=0.01, hard_fraction=0.0,
                               extent=(32.0, 32.0))
    scenes = generate_corpus(spec, 8, 2, seed=6)
    pool = build_pool(scenes, spec, corpus_seed=6)
    cfg = TrainConfig(epochs=8, steps_per_epoch=30, batch_size=32,
                      learning_rate=3e-3, seed=6)
    model, _ = train(pool, cfg)
    from dghm.losses import sigmoid
    logits, _, _ = forward(model, pool.features)
    p = sigmoid(logits)
    # training-set separation: positives score above negatives
    assert p[pool.p_star == 1].min() > p[pool.p_star == 0].mean()
    assert (p[pool.p_star == 1] > 0.5).mean() >= 0.95


def test_pool_histograms_partition_counts():
    pool = tiny_pool(eta=0.5)
    model = Predictor.create(pool.features.shape[1], seed=0)
    hists = pool_gradient_histograms(model, pool, Mode.DGHM)
    total = sum(h.total for h in hists.values())
    assert total == pool.size
    noisy = int(np.count_nonzero((pool.p_star == 0) & (pool.a == 1)))
    assert hists[Partition.NOISY].total == noisy


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=5, decay_epochs=(3, 9))


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    model = Predictor.create(5, hidden=(7, 3), seed=9)
    for w in model.weights:
        w += np.random.default_rng(1).normal(size=w.shape)
    path = tmp_path / "model.npz"
    save_checkpoint(path, model)
    loaded = load_checkpoint(path)
    assert len(loaded.weights) == len(model.weights)
    for a, b in zip(loaded.weights + loaded.biases, model.weights + model.biases):
        np.testing.assert_array_equal(a, b)


def test_training_log_csv(tmp_path):
    pool = tiny_pool()
    cfg = TrainConfig(epochs=2, steps_per_epoch=2, learning_rate=1e-3, seed=0)
    _, log = train(pool, cfg)
    path = tmp_path / "log.csv"
    save_training_log_csv(path, log, histogram_ref="hist.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,mean_loss,lr,histogram_file"
    assert len(lines) == 3
    assert lines[1].endswith("hist.csv")
