"""Minimal two-headed predictor with hand-derived backpropagation.

The network is a small tanh MLP whose final dense layer emits five numbers per
anchor: one classification logit and four box offsets.  Gradients are computed
analytically (no autodiff) and verified against central finite differences.
Harmonizer weights are recomputed each iteration from the current gradient
norms and then frozen, so no derivative flows through them.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .harmonizer import (
    EmaHistograms,
    HarmonizerConfig,
    LossSpec,
    Mode,
    build_histograms,
    classification_loss_and_grad,
    frozen_classification_loss,
    harmonize_weights,
    partition_mask,
    partition_of,
)
from .losses import ce_grad_logit, gradient_norm, sigmoid, smooth_l1, smooth_l1_grad
from .simdata import AnchorPool, sample_minibatch


class TrainingDiverged(RuntimeError):
    """Raised when the loss becomes non-finite during training."""


@dataclass
class Predictor:
    """Dense layers as (W, b) pairs; hidden activations are tanh.

    The last layer has 5 outputs: [logit, dx, dy, dw, dh].
    """

    weights: list
    biases: list

    @classmethod
    def create(cls, feature_dim: int, hidden: tuple = (32,), seed: int = 0) -> "Predictor":
        """Small uniform init for hidden layers, zeros for the output layer,
        so training starts at p = 0.5 with well-spread gradient norms."""
        rng = np.random.default_rng(seed)
        dims = [feature_dim, *hidden, 5]
        weights, biases = [], []
        for i in range(len(dims) - 1):
            fan_in = dims[i]
            if i == len(dims) - 2:
                w = np.zeros((dims[i], dims[i + 1]))
            else:
                bound = 1.0 / np.sqrt(fan_in)
                w = rng.uniform(-bound, bound, size=(dims[i], dims[i + 1]))
            weights.append(w)
            biases.append(np.zeros(dims[i + 1]))
        return cls(weights=weights, biases=biases)

    @property
    def feature_dim(self) -> int:
        return self.weights[0].shape[0]

    def parameters(self):
        for w, b in zip(self.weights, self.biases):
            yield w
            yield b

    def copy(self) -> "Predictor":
        return Predictor(weights=[w.copy() for w in self.weights],
                         biases=[b.copy() for b in self.biases])


def forward(model: Predictor, features):
    """Returns (logits (n,), offsets (n, 4), cache) for a batch of features."""
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if x.shape[1] != model.feature_dim:
        raise ValueError(f"feature dim {x.shape[1]} != model dim {model.feature_dim}")
    activations = [x]
    n_layers = len(model.weights)
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = activations[-1] @ w + b
        activations.append(z if i == n_layers - 1 else np.tanh(z))
    out = activations[-1]
    return out[:, 0], out[:, 1:5], activations


def backward(model: Predictor, activations, dlogit, doffsets):
    """Backpropagate per-example output gradients into parameter gradients.

    dlogit is (n,), doffsets (n, 4); both already include loss normalizers.
    Returns (weight grads, bias grads) shaped like the model.
    """
    dout = np.concatenate([np.asarray(dlogit)[:, None], np.asarray(doffsets)], axis=1)
    grads_w = [None] * len(model.weights)
    grads_b = [None] * len(model.biases)
    delta = dout
    for i in range(len(model.weights) - 1, -1, -1):
        grads_w[i] = activations[i].T @ delta
        grads_b[i] = delta.sum(axis=0)
        if i > 0:
            # activations[i] is tanh(z_i) for hidden layers
            delta = (delta @ model.weights[i].T) * (1.0 - activations[i] ** 2)
    return grads_w, grads_b


@dataclass
class Batch:
    """Training mini-batch as flat arrays."""

    features: np.ndarray
    p_star: np.ndarray
    a: np.ndarray
    targets: np.ndarray
    is_positive: np.ndarray  # regression computed over these only

    @classmethod
    def from_pool(cls, pool: AnchorPool, idx) -> "Batch":
        return cls(features=pool.features[idx], p_star=pool.p_star[idx],
                   a=pool.a[idx], targets=pool.targets[idx],
                   is_positive=pool.p_star[idx] == 1)


def batch_loss_and_grads(model: Predictor, batch: Batch, spec: LossSpec,
                         reg_weight: float = 1.0, histograms=None):
    """Total loss of the selected spec plus analytic parameter gradients."""
    logits, offsets, cache = forward(model, batch.features)
    cls_loss, dlogit = classification_loss_and_grad(
        logits, batch.p_star, batch.a, spec, histograms=histograms)
    n_pos = int(np.count_nonzero(batch.is_positive))
    doffsets = np.zeros_like(offsets)
    reg_loss = 0.0
    if n_pos:
        diff = offsets[batch.is_positive] - batch.targets[batch.is_positive]
        reg_loss = float(np.sum(smooth_l1(diff)) / n_pos)
        doffsets[batch.is_positive] = reg_weight * smooth_l1_grad(diff) / n_pos
    grads_w, grads_b = backward(model, cache, dlogit, doffsets)
    return cls_loss + reg_weight * reg_loss, grads_w, grads_b


def finite_difference_check(model: Predictor, batch: Batch, spec: LossSpec,
                            reg_weight: float = 1.0, step: float = 1e-6,
                            max_params: int = 1000, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    Harmonizer weights are computed once at the unperturbed point and frozen,
    matching the training contract.  Regression targets sitting within 1e-3 of
    the smooth-L1 kink are nudged away before checking.  Above max_params, a
    random subsample of coordinates is checked.
    """
    batch = replace(batch, targets=batch.targets.copy())
    logits0, offsets0, _ = forward(model, batch.features)
    if np.any(batch.is_positive):
        diff = offsets0[batch.is_positive] - batch.targets[batch.is_positive]
        near_kink = np.abs(np.abs(diff) - 1.0) < 1e-3
        if np.any(near_kink):
            t = batch.targets[batch.is_positive]
            t[near_kink] += 0.01
            batch.targets[batch.is_positive] = t

    beta = None
    m = 1
    if spec.is_harmonized:
        p = sigmoid(logits0)
        g = gradient_norm(p, batch.p_star)
        parts = partition_of(batch.p_star, batch.a, spec.harmonizer.mode)
        hb = harmonize_weights(g, parts, spec.harmonizer)
        beta, m = hb.beta, hb.M if spec.kind != "ghm_c" else 1

    def loss_at(params_model):
        logits, offsets, _ = forward(params_model, batch.features)
        cls = frozen_classification_loss(logits, batch.p_star, spec, beta=beta, m=m)
        reg = 0.0
        n_pos = int(np.count_nonzero(batch.is_positive))
        if n_pos:
            d = offsets[batch.is_positive] - batch.targets[batch.is_positive]
            reg = float(np.sum(smooth_l1(d)) / n_pos)
        return cls + reg_weight * reg

    # analytic gradients with the same frozen weights
    logits, offsets, cache = forward(model, batch.features)
    if spec.is_harmonized:
        p = sigmoid(logits)
        dlogit = beta * ce_grad_logit(p, batch.p_star) / (m * logits.size)
    else:
        _, dlogit = classification_loss_and_grad(logits, batch.p_star, batch.a, spec)
    doffsets = np.zeros_like(offsets)
    n_pos = int(np.count_nonzero(batch.is_positive))
    if n_pos:
        d = offsets[batch.is_positive] - batch.targets[batch.is_positive]
        doffsets[batch.is_positive] = reg_weight * smooth_l1_grad(d) / n_pos
    grads_w, grads_b = backward(model, cache, dlogit, doffsets)
    analytic = grads_w + grads_b
    params = model.weights + model.biases

    coords = [(pi, idx) for pi, arr in enumerate(params)
              for idx in np.ndindex(arr.shape)]
    if len(coords) > max_params:
        rng = np.random.default_rng(seed)
        chosen = rng.choice(len(coords), size=max_params, replace=False)
        coords = [coords[i] for i in chosen]

    work = model.copy()
    work_params = work.weights + work.biases
    max_rel = 0.0
    for pi, idx in coords:
        orig = work_params[pi][idx]
        work_params[pi][idx] = orig + step
        up = loss_at(work)
        work_params[pi][idx] = orig - step
        down = loss_at(work)
        work_params[pi][idx] = orig
        fd = (up - down) / (2.0 * step)
        an = analytic[pi][idx]
        rel = abs(an - fd) / max(abs(an), abs(fd), 1e-2)
        max_rel = max(max_rel, rel)
    return max_rel


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_model(cls, model: Predictor) -> "AdamState":
        params = model.weights + model.biases  # same ordering as adam_step
        return cls(m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params])


def adam_step(model: Predictor, state: AdamState, grads_w, grads_b, lr: float):
    """Standard Adam update, in place on the model."""
    state.step += 1
    t = state.step
    grads = grads_w + grads_b
    params = model.weights + model.biases
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        m_hat = state.m[i] / (1.0 - state.beta1**t)
        v_hat = state.v[i] / (1.0 - state.beta2**t)
        p -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class TrainConfig:
    loss_spec: LossSpec = field(default_factory=LossSpec)
    learning_rate: float = 1e-4
    decay_factor: float = 0.1
    decay_epochs: tuple | None = None  # default: 60% and 80% of total epochs
    epochs: int = 15
    batch_size: int = 8
    steps_per_epoch: int = 150
    hidden: tuple = (32,)
    reg_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        epochs = self.epochs
        if self.decay_epochs is None:
            first = min(max(int(epochs * 0.6), 1), epochs)
            second = min(max(int(epochs * 0.8), 2), epochs)
            self.decay_epochs = (first, second)
        if any(e < 0 or e > epochs for e in self.decay_epochs):
            raise ValueError("decay epochs must lie within the epoch range")


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    lr: float


@dataclass
class TrainLog:
    epochs: list
    final_histograms_two_way: dict
    final_histograms_three_way: dict
    epoch_histograms: list  # per epoch: {partition: counts over training batches}


def pool_gradient_histograms(model: Predictor, pool: AnchorPool, mode: Mode,
                             bin_count: int = 10):
    """Gradient-norm histograms of the current model over the whole pool."""
    logits, _, _ = forward(model, pool.features)
    g = gradient_norm(sigmoid(logits), pool.p_star)
    parts = partition_of(pool.p_star, pool.a, mode)
    cfg = HarmonizerConfig(mode=mode, bin_count=bin_count)
    return build_histograms(g, parts, cfg)


def train(pool: AnchorPool, cfg: TrainConfig):
    """Seeded training loop: sample -> forward -> harmonize -> backward -> Adam.

    Returns (trained model, TrainLog).  Raises TrainingDiverged on non-finite
    loss.
    """
    model = Predictor.create(pool.features.shape[1], hidden=cfg.hidden, seed=cfg.seed)
    state = AdamState.for_model(model)
    rng = np.random.default_rng([cfg.seed, 0xD64])
    lr = cfg.learning_rate
    spec = cfg.loss_spec
    ema = EmaHistograms(spec.harmonizer) if spec.is_harmonized else None
    records = []
    epoch_hists = []
    for epoch in range(cfg.epochs):
        if epoch in cfg.decay_epochs:
            lr *= cfg.decay_factor
        losses = []
        hist_acc: dict = {}
        for _ in range(cfg.steps_per_epoch):
            idx = sample_minibatch(pool, cfg.batch_size, rng)
            batch = Batch.from_pool(pool, idx)
            histograms = None
            if spec.is_harmonized and spec.harmonizer.momentum > 0.0:
                logits, _, _ = forward(model, batch.features)
                g = gradient_norm(sigmoid(logits), batch.p_star)
                parts = partition_of(batch.p_star, batch.a, spec.harmonizer.mode)
                histograms = ema.update(build_histograms(g, parts, spec.harmonizer))
            loss, grads_w, grads_b = batch_loss_and_grads(
                model, batch, spec, reg_weight=cfg.reg_weight, histograms=histograms)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss {loss!r} at epoch {epoch}, step {state.step}")
            # batch gradient-norm bookkeeping for the per-epoch export
            logits_now, _, _ = forward(model, batch.features)
            g_now = gradient_norm(sigmoid(logits_now), batch.p_star)
            parts_now = partition_of(batch.p_star, batch.a, Mode.DGHM)
            for part in set(parts_now.tolist()):
                mask = partition_mask(parts_now, part)
                counts = np.bincount(
                    np.minimum((g_now[mask] * 10).astype(int), 9), minlength=10)
                hist_acc[part] = hist_acc.get(part, np.zeros(10, dtype=np.int64)) + counts
            adam_step(model, state, grads_w, grads_b, lr)
            losses.append(loss)
        records.append(EpochRecord(epoch=epoch, mean_loss=float(np.mean(losses)), lr=lr))
        epoch_hists.append(hist_acc)
    log = TrainLog(
        epochs=records,
        final_histograms_two_way=pool_gradient_histograms(model, pool, Mode.DGHM),
        final_histograms_three_way=pool_gradient_histograms(model, pool, Mode.DGHM_STAR),
        epoch_histograms=epoch_hists,
    )
    return model, log


# ---------------------------------------------------------------------------
# Checkpoint and log serialization.
# ---------------------------------------------------------------------------


def save_checkpoint(path, model: Predictor):
    """npz of flat arrays plus an embedded JSON manifest of layer shapes."""
    arrays = {}
    manifest = {"layers": []}
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        arrays[f"w{i}"] = w
        arrays[f"b{i}"] = b
        manifest["layers"].append({"w": list(w.shape), "b": list(b.shape)})
    arrays["manifest"] = np.frombuffer(json.dumps(manifest).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path) -> Predictor:
    with np.load(path) as data:
        manifest = json.loads(bytes(data["manifest"]).decode())
        weights = [data[f"w{i}"] for i in range(len(manifest["layers"]))]
        biases = [data[f"b{i}"] for i in range(len(manifest["layers"]))]
    return Predictor(weights=weights, biases=biases)


def save_training_log_csv(path, log: TrainLog, histogram_ref: str = ""):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_loss", "lr", "histogram_file"])
        for rec in log.epochs:
            writer.writerow([rec.epoch, f"{rec.mean_loss:.10g}", f"{rec.lr:.10g}",
                             histogram_ref])
