"""Gradient-density estimation over decoupled example partitions.

The harmonizer bins gradient norms g = |p - p*| into fixed unit regions over
[0, 1], estimates the gradient density GD(g) = count_in_bin / valid_length,
and turns it into per-example weights

    beta_i = N' / GD(g_i)^{gamma_i}

where gamma_i switches to mu_n (noisy outliers, g >= lambda) or mu_c (clean
outliers) and is 1 otherwise.  Three modes are supported:

* GHM       -- one pooled histogram, gamma forced to 1 (classic GHM-C).
* DGHM      -- two histograms: noisy (negatives from abnormal scenes) vs clean.
* DGHM_STAR -- three histograms: abnormal-positive, abnormal-negative,
               normal-negative.

Weights are constants of the current batch: no gradient ever flows through
the histogram or beta.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .losses import (
    EPS,
    FocalParams,
    SceParams,
    ce_grad_logit,
    ce_loss,
    focal_grad_logit,
    focal_loss,
    gradient_norm,
    sce_grad_logit,
    sce_loss,
    sigmoid,
)


class Mode(str, Enum):
    GHM = "GHM"
    DGHM = "DGHM"
    DGHM_STAR = "DGHM_STAR"


class Partition(str, Enum):
    POOLED = "pooled"
    CLEAN = "clean"
    NOISY = "noisy"
    AP_POS = "ap_pos"
    AP_NEG = "ap_neg"
    NP_NEG = "np_neg"


#: Partitions a mode can produce, in canonical order.
MODE_PARTITIONS = {
    Mode.GHM: (Partition.POOLED,),
    Mode.DGHM: (Partition.CLEAN, Partition.NOISY),
    Mode.DGHM_STAR: (Partition.AP_POS, Partition.AP_NEG, Partition.NP_NEG),
}

#: Partitions whose labels may be wrong (negatives in abnormal scenes).
NOISY_PARTITIONS = frozenset({Partition.NOISY, Partition.AP_NEG})


@dataclass(frozen=True)
class HarmonizerConfig:
    mode: Mode = Mode.DGHM
    bin_count: int = 10
    mu_n: float = 2.0
    mu_c: float = 0.5
    outlier_threshold: float = 0.9  # lambda
    n_convention: str = "total"  # "total" or "partition"
    momentum: float = 0.0  # EMA over bin counts across iterations; 0 disables

    def __post_init__(self):
        if self.bin_count < 1:
            raise ValueError("bin_count must be >= 1")
        if not 0.0 <= self.outlier_threshold <= 1.0:
            raise ValueError("outlier_threshold must be in [0, 1]")
        if self.mu_n <= 0.0 or self.mu_c <= 0.0:
            raise ValueError("mu_n and mu_c must be > 0")
        if self.n_convention not in ("total", "partition"):
            raise ValueError("n_convention must be 'total' or 'partition'")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        object.__setattr__(self, "mode", Mode(self.mode))


@dataclass
class GradientHistogram:
    """Binned counts of gradient norms over [0, 1].

    Bins are half-open [k*eps, (k+1)*eps) except the last, which is closed
    at 1.  Counts may be fractional when EMA smoothing is active.
    """

    bin_count: int
    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.float64)
        if self.counts.shape != (self.bin_count,):
            raise ValueError("counts must have one entry per bin")

    @property
    def bin_width(self) -> float:
        return 1.0 / self.bin_count

    @property
    def total(self) -> float:
        return float(self.counts.sum())

    @classmethod
    def from_values(cls, g, bin_count: int) -> "GradientHistogram":
        g = np.asarray(g, dtype=np.float64)
        if g.size and (g.min() < 0.0 or g.max() > 1.0):
            raise ValueError("gradient norms must lie in [0, 1]")
        idx = bin_index(g, bin_count)
        counts = np.bincount(idx, minlength=bin_count).astype(np.float64)
        return cls(bin_count=bin_count, counts=counts)


def bin_index(g, bin_count: int):
    """Bin of g under the half-open convention; g = 1 falls in the last bin."""
    g = np.asarray(g, dtype=np.float64)
    return np.minimum((g * bin_count).astype(np.int64), bin_count - 1)


def valid_length(g, bin_count: int):
    """Length of the unit region around g clipped to [0, 1]."""
    g = np.asarray(g, dtype=np.float64)
    half = 0.5 / bin_count
    return np.minimum(g + half, 1.0) - np.maximum(g - half, 0.0)


def gradient_density(hist: GradientHistogram, g):
    """GD(g) = count of the bin containing g divided by the clipped region length.

    An empty bin counts as 1 so the density is always positive; that floor can
    only fire for curve sampling, never for a g that was itself binned.
    """
    g = np.asarray(g, dtype=np.float64)
    if g.size and (g.min() < 0.0 or g.max() > 1.0):
        raise ValueError("gradient norms must lie in [0, 1]")
    count = np.maximum(hist.counts[bin_index(g, hist.bin_count)], 1.0)
    return count / valid_length(g, hist.bin_count)


def partition_of(p_star, a, mode: Mode):
    """Map (given label, scene attribute) to the partition for this mode.

    Vectorized; returns an object array of Partition members for array input
    or a single Partition for scalars.
    """
    mode = Mode(mode)
    p_star = np.asarray(p_star)
    a = np.asarray(a)
    scalar = p_star.ndim == 0
    p_star = np.atleast_1d(p_star).astype(np.int64)
    a = np.atleast_1d(a).astype(np.int64)
    n = p_star.size
    # np.full would coerce the str-backed enum members to plain strings
    if mode is Mode.GHM:
        out = np.array([Partition.POOLED] * n, dtype=object)
    elif mode is Mode.DGHM:
        out = np.array([Partition.CLEAN] * n, dtype=object)
        out[(p_star == 0) & (a == 1)] = Partition.NOISY
    else:
        if np.any((p_star == 1) & (a == 0)):
            raise ValueError("a positive label in a normal scene is inconsistent")
        out = np.array([Partition.NP_NEG] * n, dtype=object)
        out[(p_star == 1) & (a == 1)] = Partition.AP_POS
        out[(p_star == 0) & (a == 1)] = Partition.AP_NEG
    return out[0] if scalar else out


def partition_mask(parts, part: Partition):
    """Boolean mask of entries equal to the given partition.

    Numpy's broadcast `==` stringifies the enum scalar, so compare explicitly.
    """
    parts = np.asarray(parts, dtype=object)
    return np.fromiter((x is part for x in parts), dtype=bool, count=parts.size)


def build_histograms(g, parts, cfg: HarmonizerConfig):
    """One histogram per partition of cfg.mode (empty partitions get zero counts)."""
    g = np.asarray(g, dtype=np.float64)
    parts = np.asarray(parts, dtype=object)
    if g.shape != parts.shape:
        raise ValueError("g and parts must have equal length")
    hists = {}
    for part in MODE_PARTITIONS[cfg.mode]:
        mask = partition_mask(parts, part)
        hists[part] = GradientHistogram.from_values(g[mask], cfg.bin_count)
    return hists


class EmaHistograms:
    """Optional cross-iteration exponential moving average of bin counts.

    With momentum m, smoothed counts are m * previous + (1 - m) * current.
    Disabled (pass-through) when cfg.momentum == 0.
    """

    def __init__(self, cfg: HarmonizerConfig):
        self.cfg = cfg
        self._state: dict[Partition, np.ndarray] = {}

    def update(self, hists):
        if self.cfg.momentum == 0.0:
            return hists
        m = self.cfg.momentum
        smoothed = {}
        for part, hist in hists.items():
            prev = self._state.get(part)
            counts = hist.counts if prev is None else m * prev + (1.0 - m) * hist.counts
            self._state[part] = counts
            smoothed[part] = GradientHistogram(hist.bin_count, counts.copy())
        return smoothed


@dataclass
class HarmonizedBatch:
    """Per-example harmonizer outputs plus the batch bookkeeping constants."""

    g: np.ndarray
    partitions: np.ndarray
    beta: np.ndarray
    gamma_applied: np.ndarray
    histograms: dict
    M: int  # number of gradient-norm distributions (1, 2 or 3 by mode)
    N: int  # batch size


def harmonize_weights(g, parts, cfg: HarmonizerConfig, histograms=None) -> HarmonizedBatch:
    """Compute beta_i = N' / GD(g_i)^{gamma_i} for every example.

    N' is the total batch size under the "total" convention or the example's
    partition size under "partition".  GD is evaluated on the example's own
    partition histogram (the pooled histogram in GHM mode).  In GHM mode the
    exponent is always 1.
    """
    g = np.asarray(g, dtype=np.float64)
    parts = np.asarray(parts, dtype=object)
    if g.shape != parts.shape:
        raise ValueError("g and parts must have equal length")
    if histograms is None:
        histograms = build_histograms(g, parts, cfg)
    n_total = g.size
    beta = np.empty(n_total, dtype=np.float64)
    gamma = np.ones(n_total, dtype=np.float64)
    for part, hist in histograms.items():
        mask = partition_mask(parts, part)
        if not np.any(mask):
            continue
        gp = g[mask]
        gd = gradient_density(hist, gp)
        gp_gamma = np.ones(gp.size, dtype=np.float64)
        if cfg.mode is not Mode.GHM:
            outlier = gp >= cfg.outlier_threshold
            gp_gamma[outlier] = cfg.mu_n if part in NOISY_PARTITIONS else cfg.mu_c
        n_prime = n_total if cfg.n_convention == "total" else int(np.count_nonzero(mask))
        beta[mask] = n_prime / gd**gp_gamma
        gamma[mask] = gp_gamma
    return HarmonizedBatch(
        g=g,
        partitions=parts,
        beta=beta,
        gamma_applied=gamma,
        histograms=histograms,
        M=len(MODE_PARTITIONS[cfg.mode]),
        N=n_total,
    )


def ghm_c_loss(logits, p_star, cfg: HarmonizerConfig = None, histograms=None):
    """Pooled-histogram harmonized CE: (1/N) sum beta_i * CE_i.

    Returns (scalar loss, beta weights).
    """
    if cfg is None:
        cfg = HarmonizerConfig(mode=Mode.GHM)
    if cfg.mode is not Mode.GHM:
        raise ValueError("ghm_c_loss requires GHM mode")
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size == 0:
        raise ValueError("empty batch")
    p = sigmoid(logits)
    p_star = np.asarray(p_star, dtype=np.float64)
    g = gradient_norm(p, p_star)
    parts = partition_of(p_star, np.zeros_like(p_star), cfg.mode)
    batch = harmonize_weights(g, parts, cfg, histograms=histograms)
    loss = float(np.sum(batch.beta * ce_loss(p, p_star)) / batch.N)
    return loss, batch.beta


def dghm_c_loss(logits, p_star, a, cfg: HarmonizerConfig, histograms=None):
    """Decoupled harmonized CE: (1/(M*N)) sum beta_i * CE_i.

    Returns (scalar loss, HarmonizedBatch).  M is fixed by the mode (2 or 3)
    even when a partition is empty in this batch.
    """
    if cfg.mode is Mode.GHM:
        raise ValueError("dghm_c_loss requires DGHM or DGHM_STAR mode")
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size == 0:
        raise ValueError("empty batch")
    p = sigmoid(logits)
    p_star = np.asarray(p_star, dtype=np.float64)
    g = gradient_norm(p, p_star)
    parts = partition_of(p_star, a, cfg.mode)
    batch = harmonize_weights(g, parts, cfg, histograms=histograms)
    loss = float(np.sum(batch.beta * ce_loss(p, p_star)) / (batch.M * batch.N))
    return loss, batch


# ---------------------------------------------------------------------------
# Loss selection used by the trainer and the experiment runner.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LossSpec:
    """Tagged configuration selecting the classification loss family."""

    kind: str = "ce"  # ce | focal | sce | ghm_c | dghm_c | dghm_c_star
    focal: FocalParams = field(default_factory=FocalParams)
    sce: SceParams = field(default_factory=SceParams)
    harmonizer: HarmonizerConfig = field(default_factory=HarmonizerConfig)

    KINDS = ("ce", "focal", "sce", "ghm_c", "dghm_c", "dghm_c_star")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        # force the harmonizer mode to agree with the tag
        if self.kind == "ghm_c" and self.harmonizer.mode is not Mode.GHM:
            object.__setattr__(self, "harmonizer", HarmonizerConfig(
                mode=Mode.GHM, bin_count=self.harmonizer.bin_count,
                momentum=self.harmonizer.momentum))
        if self.kind == "dghm_c" and self.harmonizer.mode is not Mode.DGHM:
            object.__setattr__(self, "harmonizer", _with_mode(self.harmonizer, Mode.DGHM))
        if self.kind == "dghm_c_star" and self.harmonizer.mode is not Mode.DGHM_STAR:
            object.__setattr__(self, "harmonizer", _with_mode(self.harmonizer, Mode.DGHM_STAR))

    @property
    def is_harmonized(self) -> bool:
        return self.kind in ("ghm_c", "dghm_c", "dghm_c_star")


def _with_mode(cfg: HarmonizerConfig, mode: Mode) -> HarmonizerConfig:
    return HarmonizerConfig(
        mode=mode, bin_count=cfg.bin_count, mu_n=cfg.mu_n, mu_c=cfg.mu_c,
        outlier_threshold=cfg.outlier_threshold, n_convention=cfg.n_convention,
        momentum=cfg.momentum)


def classification_loss_and_grad(logits, p_star, a, spec: LossSpec, histograms=None):
    """Batch-mean classification loss plus per-example d(loss)/d(logit).

    Harmonizer weights (beta) are computed from the current logits and then
    frozen: the returned gradient treats them as constants.
    """
    logits = np.asarray(logits, dtype=np.float64)
    p = sigmoid(logits)
    p_star = np.asarray(p_star, dtype=np.float64)
    n = logits.size
    if n == 0:
        raise ValueError("empty batch")
    if spec.kind == "ce":
        loss = float(np.mean(ce_loss(p, p_star)))
        dlogit = ce_grad_logit(p, p_star) / n
    elif spec.kind == "focal":
        loss = float(np.mean(focal_loss(p, p_star, spec.focal)))
        dlogit = focal_grad_logit(p, p_star, spec.focal) / n
    elif spec.kind == "sce":
        loss = float(np.mean(sce_loss(p, p_star, spec.sce)))
        dlogit = sce_grad_logit(p, p_star, spec.sce) / n
    elif spec.kind == "ghm_c":
        loss, beta = ghm_c_loss(logits, p_star, spec.harmonizer,
                                histograms=histograms)
        dlogit = beta * ce_grad_logit(p, p_star) / n
    else:
        loss, batch = dghm_c_loss(logits, p_star, a, spec.harmonizer, histograms=histograms)
        dlogit = batch.beta * ce_grad_logit(p, p_star) / (batch.M * batch.N)
    return loss, dlogit


def frozen_classification_loss(logits, p_star, spec: LossSpec, beta=None, m: int = 1):
    """Loss value with externally fixed harmonizer weights.

    Used by the finite-difference harness: beta is computed once at the
    unperturbed point and kept constant while parameters move.
    """
    logits = np.asarray(logits, dtype=np.float64)
    p = sigmoid(logits)
    p_star = np.asarray(p_star, dtype=np.float64)
    n = logits.size
    if spec.kind == "ce":
        return float(np.mean(ce_loss(p, p_star)))
    if spec.kind == "focal":
        return float(np.mean(focal_loss(p, p_star, spec.focal)))
    if spec.kind == "sce":
        return float(np.mean(sce_loss(p, p_star, spec.sce)))
    if beta is None:
        raise ValueError("harmonized losses need frozen beta weights")
    return float(np.sum(beta * ce_loss(p, p_star)) / (m * n))


# ---------------------------------------------------------------------------
# Reformulated-gradient curves and CSV exports (figure data).
# ---------------------------------------------------------------------------


def reformulated_gradient_curve(spec: LossSpec, histograms=None, partition=None,
                                samples: int = 201):
    """Sampled (g, effective gradient contribution) curve over [0, 1].

    CE gives the identity curve; focal gives the analytic modulated gradient
    magnitude for a foreground example at p = 1 - g; harmonized losses emit
    beta(g) * g evaluated on the supplied histogram for the requested
    partition.
    """
    g = np.linspace(0.0, 1.0, samples)
    if spec.kind == "ce":
        return g, g.copy()
    if spec.kind == "focal":
        alpha, gamma = spec.focal.alpha, spec.focal.gamma
        p = np.clip(1.0 - g, EPS, 1.0 - EPS)
        eff = alpha * (g ** (gamma + 1.0) - gamma * g**gamma * p * np.log(p))
        return g, eff
    if spec.kind == "sce":
        p = np.clip(1.0 - g, EPS, 1.0 - EPS)
        eff = np.abs(sce_grad_logit(p, np.ones_like(p), spec.sce))
        return g, eff
    # harmonized: weight(g) * g on a concrete histogram
    if histograms is None:
        raise ValueError("harmonized curves need a fitted histogram")
    cfg = spec.harmonizer
    if partition is None:
        partition = next(iter(histograms))
    hist = histograms[partition]
    gd = gradient_density(hist, g)
    gamma = np.ones_like(g)
    if cfg.mode is not Mode.GHM:
        outlier = g >= cfg.outlier_threshold
        gamma[outlier] = cfg.mu_n if partition in NOISY_PARTITIONS else cfg.mu_c
    n_prime = sum(h.total for h in histograms.values()) if cfg.n_convention == "total" else hist.total
    beta = n_prime / gd**gamma
    return g, beta * g


def export_histograms_csv(path, mode: Mode, histograms):
    """Write (mode, partition, bin_index, bin_low, bin_high, count) rows."""
    mode = Mode(mode)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mode", "partition", "bin_index", "bin_low", "bin_high", "count"])
        for part in MODE_PARTITIONS[mode]:
            hist = histograms[part]
            eps = hist.bin_width
            for k in range(hist.bin_count):
                writer.writerow([mode.value, part.value, k,
                                 f"{k * eps:.10g}", f"{(k + 1) * eps:.10g}",
                                 f"{hist.counts[k]:.10g}"])


def load_histograms_csv(path):
    """Inverse of export_histograms_csv; returns (mode, {partition: histogram})."""
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append(row)
    if not rows:
        raise ValueError(f"no histogram rows in {path}")
    mode = Mode(rows[0]["mode"])
    hists = {}
    by_part: dict[str, list] = {}
    for row in rows:
        by_part.setdefault(row["partition"], []).append(row)
    for part_name, part_rows in by_part.items():
        part_rows.sort(key=lambda r: int(r["bin_index"]))
        counts = np.array([float(r["count"]) for r in part_rows])
        hists[Partition(part_name)] = GradientHistogram(len(part_rows), counts)
    return mode, hists


def export_curves_csv(path, curves):
    """Write (loss_name, g, effective_gradient) rows; curves is {name: (g, eff)}."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["loss_name", "g", "effective_gradient"])
        for name, (g, eff) in curves.items():
            for gi, ei in zip(g, eff):
                writer.writerow([name, f"{gi:.10g}", f"{ei:.10g}"])
