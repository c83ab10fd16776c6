"""Reproducible experiment runner over the synthetic benchmark.

Builds corpora, trains models under different classification losses, and
evaluates them with the detection metric suite.  Every run is identified by a
config hash and a seed; emitted CSVs are byte-reproducible and every summary
statistic is recomputable from the emitted per-run rows.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import shutil
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import metrics as M
from .harmonizer import (
    GradientHistogram,
    HarmonizerConfig,
    LossSpec,
    Mode,
    Partition,
    export_curves_csv,
    export_histograms_csv,
    load_histograms_csv,
    reformulated_gradient_curve,
)
from .losses import sigmoid
from .model import (
    TrainConfig,
    forward,
    pool_gradient_histograms,
    save_checkpoint,
    save_training_log_csv,
    train,
)
from .simdata import (
    AnchorPool,
    CorruptionSpec,
    SceneSpec,
    build_anchor_grid,
    build_pool,
    corrupt_annotations,
    generate_corpus,
    save_corpus,
    scene_spec_from_dict,
    scene_spec_to_dict,
)

DEFAULT_LOSSES = ("ce", "focal", "ghm_c", "sce", "dghm_c")


@dataclass(frozen=True)
class CorpusConfig:
    scene_spec: SceneSpec = field(default_factory=SceneSpec)
    n_ap: int = 64
    n_np: int = 64
    seed: int = 42


@dataclass
class ExperimentConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    losses: tuple = DEFAULT_LOSSES
    eta: float = 0.7
    eta_grid: tuple = (0.2, 0.3, 0.4, 0.5, 0.6, 0.7)
    mu_grid: tuple = ((1.0, 1.0), (2.0, 1.0), (1.0, 0.5), (0.5, 2.0), (2.0, 0.5))
    lambda_grid: tuple = (0.7, 0.8, 0.9)
    harmonizer: HarmonizerConfig = field(
        default_factory=lambda: HarmonizerConfig(momentum=0.7))
    folds: int = 5
    seeds: tuple = (0, 1, 2, 3, 4)
    # desk-scale training defaults; the paper-scale learning schedule shape
    # (x0.1 decay at 60%/80% of epochs) is preserved
    learning_rate: float = 3e-3
    epochs: int = 40
    batch_size: int = 256
    steps_per_epoch: int = 60
    hidden: tuple = (32,)
    reg_weight: float = 1.0
    include_dghm_star: bool = False

    def config_hash(self) -> str:
        payload = json.dumps(experiment_config_to_dict(self), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class RunRecord:
    config_hash: str
    loss: str
    eta: float
    fold: int
    seed: int
    report: M.MetricsReport
    wall_time: float


def experiment_config_to_dict(cfg: ExperimentConfig) -> dict:
    def convert(obj):
        if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
            return {k: convert(v) for k, v in dataclasses.asdict(obj).items()}
        if isinstance(obj, (tuple, list)):
            return [convert(v) for v in obj]
        if isinstance(obj, Mode):
            return obj.value
        return obj

    return convert(cfg)


def experiment_config_from_dict(d: dict) -> ExperimentConfig:
    kwargs = dict(d)
    if "corpus" in kwargs:
        c = dict(kwargs["corpus"])
        if "scene_spec" in c:
            c["scene_spec"] = scene_spec_from_dict(c["scene_spec"])
        kwargs["corpus"] = CorpusConfig(**{
            k: tuple(v) if isinstance(v, list) and k != "scene_spec" else v
            for k, v in c.items()})
    if "harmonizer" in kwargs:
        kwargs["harmonizer"] = HarmonizerConfig(**kwargs["harmonizer"])
    for key in ("losses", "eta_grid", "lambda_grid", "seeds", "hidden"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    if "mu_grid" in kwargs:
        kwargs["mu_grid"] = tuple(tuple(pair) for pair in kwargs["mu_grid"])
    return ExperimentConfig(**kwargs)


def validate_config_dict(d: dict):
    """Schema check: unknown keys or malformed values raise ValueError."""
    allowed = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(d) - allowed
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    try:
        cfg = experiment_config_from_dict(d)
    except TypeError as exc:
        raise ValueError(str(exc)) from exc
    if not cfg.losses:
        raise ValueError("losses must be nonempty")
    if not cfg.seeds or len(set(cfg.seeds)) != len(cfg.seeds):
        raise ValueError("seeds must be nonempty and distinct")
    return cfg


def loss_spec_for(name: str, harmonizer: HarmonizerConfig) -> LossSpec:
    if name in ("ghm_c", "dghm_c", "dghm_c_star"):
        return LossSpec(kind=name, harmonizer=harmonizer)
    return LossSpec(kind=name)


# ---------------------------------------------------------------------------
# Folds.
# ---------------------------------------------------------------------------


def kfold_split(scenes, k: int, seed: int):
    """Scene-level stratified folds: AP and NP scenes dealt round-robin.

    Returns a list of k sorted scene-id lists forming a disjoint cover.
    """
    if k < 2 or k > len(scenes):
        raise ValueError(f"fold count {k} must be in [2, {len(scenes)}]")
    rng = np.random.default_rng(seed)
    ap_ids = [s.scene_id for s in scenes if s.is_abnormal]
    np_ids = [s.scene_id for s in scenes if not s.is_abnormal]
    rng.shuffle(ap_ids)
    rng.shuffle(np_ids)
    folds = [[] for _ in range(k)]
    for i, sid in enumerate(ap_ids):
        folds[i % k].append(sid)
    for i, sid in enumerate(np_ids):
        folds[(k - 1 - i) % k].append(sid)
    return [sorted(f) for f in folds]


# ---------------------------------------------------------------------------
# Single run.
# ---------------------------------------------------------------------------


def predict_scenes(model, scenes, spec: SceneSpec, corpus_seed: int):
    """Detections for a scene list: forward every anchor, decode, suppress."""
    pool = build_pool(scenes, spec, corpus_seed)
    logits, offsets, _ = forward(model, pool.features)
    scores = sigmoid(logits)
    return M.decode_and_suppress(pool.boxes, pool.scene_id, scores, offsets)


def evaluate_model(model, train_scenes_corrupted, test_scenes, removed,
                   spec: SceneSpec, corpus_seed: int) -> M.MetricsReport:
    """Full metric suite: test-fold detection metrics plus training T/R-recall.

    The operating threshold is chosen on the test fold (precision >= 0.2) and
    reused for the training-scene recalls.
    """
    test_dets = predict_scenes(model, test_scenes, spec, corpus_seed)
    gt_by_scene = {s.scene_id: list(s.gt_boxes) for s in test_scenes if s.is_abnormal}
    np_ids = [s.scene_id for s in test_scenes if not s.is_abnormal]
    flags = []
    if not test_dets:
        flags.append("no_detections")
        return M.MetricsReport(flags=flags)
    thr, thr_flag = M.operating_point(test_dets, gt_by_scene)
    if thr_flag:
        flags.append("precision_floor_unreached")
    kept_dets = [d for d in test_dets if d.score >= thr]
    rep = M.aggregate_match(kept_dets, gt_by_scene)
    rec, rec_flag = M.recall(rep)
    prec, prec_flag = M.precision(rep)
    if rec_flag:
        flags.append("recall_zero_denominator")
    if prec_flag:
        flags.append("precision_zero_denominator")
    nfps_value = M.nfps(test_dets, np_ids, thr) if np_ids else 0.0
    froc_value = M.froc(test_dets, gt_by_scene, np_ids) if np_ids else 0.0

    train_dets = predict_scenes(model, train_scenes_corrupted, spec, corpus_seed)
    kept_by_scene = {}
    removed_by_scene = {}
    removed_set = set(removed)
    for s in train_scenes_corrupted:
        if not s.is_abnormal:
            continue
        kept_by_scene[s.scene_id] = s.annotated_boxes()
        rem = [b for j, b in enumerate(s.gt_boxes) if (s.scene_id, j) in removed_set]
        if rem:
            removed_by_scene[s.scene_id] = rem
    t_rec, r_rec, rr_flag = M.t_r_recall(train_dets, kept_by_scene, removed_by_scene, thr)
    if rr_flag:
        flags.append("r_recall_undefined")
    return M.MetricsReport(recall=rec, precision=prec, nfps=nfps_value,
                           froc=froc_value, t_recall=t_rec, r_recall=r_rec,
                           threshold=thr, flags=flags)


def run_single(cfg: ExperimentConfig, loss_name: str, eta: float, fold: int,
               seed: int, harmonizer: HarmonizerConfig | None = None,
               return_model: bool = False):
    """One (loss, eta, fold, seed) training/evaluation cycle."""
    start = time.perf_counter()
    scenes = generate_corpus(cfg.corpus.scene_spec, cfg.corpus.n_ap,
                             cfg.corpus.n_np, cfg.corpus.seed)
    folds = kfold_split(scenes, cfg.folds, cfg.corpus.seed)
    test_ids = set(folds[fold])
    train_scenes = [s for s in scenes if s.scene_id not in test_ids]
    test_scenes = [s for s in scenes if s.scene_id in test_ids]
    corrupted, removed = corrupt_annotations(
        train_scenes, CorruptionSpec(eta=eta, seed=seed))
    pool = build_pool(corrupted, cfg.corpus.scene_spec, cfg.corpus.seed)
    spec = loss_spec_for(loss_name, harmonizer or cfg.harmonizer)
    train_cfg = TrainConfig(loss_spec=spec, learning_rate=cfg.learning_rate,
                            epochs=cfg.epochs, batch_size=cfg.batch_size,
                            steps_per_epoch=cfg.steps_per_epoch, hidden=cfg.hidden,
                            reg_weight=cfg.reg_weight, seed=seed)
    model, log = train(pool, train_cfg)
    report = evaluate_model(model, corrupted, test_scenes, removed,
                            cfg.corpus.scene_spec, cfg.corpus.seed)
    record = RunRecord(config_hash=cfg.config_hash(), loss=loss_name, eta=eta,
                       fold=fold, seed=seed, report=report,
                       wall_time=time.perf_counter() - start)
    if return_model:
        return record, model, log, pool
    return record


def _run_single_star(args):
    return run_single(*args)


def run_many(tasks, jobs: int = 1):
    """Run (cfg, loss, eta, fold, seed, harmonizer) tuples, optionally parallel."""
    if jobs <= 1:
        return [run_single(*t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_single_star, tasks))


# ---------------------------------------------------------------------------
# CSV emission.
# ---------------------------------------------------------------------------

RUN_COLUMNS = ["config_hash", "loss", "eta", "fold", "seed",
               "precision", "nfps", "recall", "froc", "t_recall", "r_recall",
               "threshold", "flags"]


def _fmt(value) -> str:
    if value is None:
        return "undefined"
    if isinstance(value, float):
        return f"{value:.10g}"
    return str(value)


def write_run_rows(path, records):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RUN_COLUMNS)
        for rec in records:
            r = rec.report
            writer.writerow([rec.config_hash, rec.loss, _fmt(rec.eta), rec.fold,
                             rec.seed, _fmt(r.precision), _fmt(r.nfps), _fmt(r.recall),
                             _fmt(r.froc), _fmt(r.t_recall), _fmt(r.r_recall),
                             _fmt(r.threshold), ";".join(r.flags)])


def read_run_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def summarize(records, group_key):
    """Mean and std per group of the four headline metrics.

    Raises when records carry mixed config hashes: aggregation across different
    configs is an error.
    """
    hashes = {rec.config_hash for rec in records}
    if len(hashes) > 1:
        raise ValueError(f"refusing to aggregate mixed configs: {sorted(hashes)}")
    groups: dict = {}
    for rec in records:
        groups.setdefault(group_key(rec), []).append(rec)
    rows = []
    for key in sorted(groups, key=str):
        recs = groups[key]
        row = {"group": key, "n": len(recs)}
        for metric in ("precision", "nfps", "recall", "froc", "t_recall", "r_recall"):
            vals = [getattr(r.report, metric) for r in recs]
            vals = [v for v in vals if v is not None]
            if not vals:
                row[f"{metric}_mean"] = None
                row[f"{metric}_std"] = None
            else:
                row[f"{metric}_mean"] = float(np.mean(vals))
                row[f"{metric}_std"] = float(np.std(vals)) if len(vals) > 1 else None
        rows.append(row)
    return rows


def write_summary_rows(path, rows):
    metrics_cols = []
    for metric in ("precision", "nfps", "recall", "froc", "t_recall", "r_recall"):
        metrics_cols += [f"{metric}_mean", f"{metric}_std"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["group", "n"] + metrics_cols)
        for row in rows:
            writer.writerow([row["group"], row["n"]] +
                            [_fmt(row[c]) for c in metrics_cols])


# ---------------------------------------------------------------------------
# Command implementations (the CLI wraps these).
# ---------------------------------------------------------------------------


def cmd_gen(cfg: ExperimentConfig, out_dir, force: bool = False):
    """Serialize the corpus and its manifest; refuses to overwrite without force."""
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus_path = out_dir / "corpus.txt"
    manifest_path = out_dir / "corpus_manifest.json"
    if corpus_path.exists() and not force:
        raise FileExistsError(f"{corpus_path} exists; pass force to overwrite")
    scenes = generate_corpus(cfg.corpus.scene_spec, cfg.corpus.n_ap,
                             cfg.corpus.n_np, cfg.corpus.seed)
    save_corpus(corpus_path, scenes, cfg.corpus.scene_spec, cfg.corpus.seed,
                manifest_path=manifest_path)
    return corpus_path


def cmd_train(cfg: ExperimentConfig, out_dir, loss_name: str | None = None,
              eta: float | None = None, seed: int | None = None):
    """Train one model and export checkpoint, log, and histogram CSVs."""
    out_dir.mkdir(parents=True, exist_ok=True)
    loss_name = loss_name or cfg.losses[0]
    eta = cfg.eta if eta is None else eta
    seed = cfg.seeds[0] if seed is None else seed
    record, model, log, pool = run_single(cfg, loss_name, eta, fold=0, seed=seed,
                                          return_model=True)
    save_checkpoint(out_dir / "checkpoint.npz", model)
    hist2_path = out_dir / "gradient_hist_two_way.csv"
    hist3_path = out_dir / "gradient_hist_three_way.csv"
    export_histograms_csv(hist2_path, Mode.DGHM, log.final_histograms_two_way)
    export_histograms_csv(hist3_path, Mode.DGHM_STAR, log.final_histograms_three_way)
    save_training_log_csv(out_dir / "training_log.csv", log,
                          histogram_ref=hist2_path.name)
    M.write_report(out_dir / "report.txt", record.report)
    return record


def cmd_compare_losses(cfg: ExperimentConfig, out_dir, jobs: int = 1):
    """Per-(loss, fold, seed) metric rows plus mean/std summary per loss."""
    out_dir.mkdir(parents=True, exist_ok=True)
    losses = list(cfg.losses)
    if cfg.include_dghm_star and "dghm_c_star" not in losses:
        losses.append("dghm_c_star")
    tasks = [(cfg, loss, cfg.eta, fold, seed)
             for loss in losses
             for fold in range(cfg.folds)
             for seed in cfg.seeds]
    records = run_many(tasks, jobs=jobs)
    write_run_rows(out_dir / "compare_runs.csv", records)
    rows = summarize(records, lambda r: r.loss)
    write_summary_rows(out_dir / "compare_summary.csv", rows)
    return records, rows


def cmd_ablate(cfg: ExperimentConfig, out_dir, jobs: int = 1):
    """Two grids: (mu_n, mu_c) at fixed lambda, and lambda at fixed (mu_n, mu_c)."""
    out_dir.mkdir(parents=True, exist_ok=True)
    base = cfg.harmonizer
    mu_tasks = []
    for mu_n, mu_c in cfg.mu_grid:
        h = HarmonizerConfig(mode=Mode.DGHM, bin_count=base.bin_count, mu_n=mu_n,
                             mu_c=mu_c, outlier_threshold=base.outlier_threshold,
                             n_convention=base.n_convention)
        mu_tasks += [(cfg, "dghm_c", cfg.eta, 0, seed, h) for seed in cfg.seeds]
    mu_records = run_many(mu_tasks, jobs=jobs)
    write_run_rows(out_dir / "ablate_mu_runs.csv", mu_records)
    # seed order matches task order: reconstruct the grid labels
    labels = [f"mu_n={mu_n:g},mu_c={mu_c:g}" for mu_n, mu_c in cfg.mu_grid
              for _ in cfg.seeds]
    by_label: dict = {}
    for label, rec in zip(labels, mu_records):
        by_label.setdefault(label, []).append(rec)
    mu_rows = []
    for label in dict.fromkeys(labels):
        mu_rows += summarize(by_label[label], lambda r, lab=label: lab)
    write_summary_rows(out_dir / "ablate_mu_summary.csv", mu_rows)

    lam_tasks = []
    for lam in cfg.lambda_grid:
        h = HarmonizerConfig(mode=Mode.DGHM, bin_count=base.bin_count,
                             mu_n=base.mu_n, mu_c=base.mu_c,
                             outlier_threshold=lam, n_convention=base.n_convention)
        lam_tasks += [(cfg, "dghm_c", cfg.eta, 0, seed, h) for seed in cfg.seeds]
    lam_records = run_many(lam_tasks, jobs=jobs)
    write_run_rows(out_dir / "ablate_lambda_runs.csv", lam_records)
    lam_labels = [f"lambda={lam:g}" for lam in cfg.lambda_grid for _ in cfg.seeds]
    by_label = {}
    for label, rec in zip(lam_labels, lam_records):
        by_label.setdefault(label, []).append(rec)
    lam_rows = []
    for label in dict.fromkeys(lam_labels):
        lam_rows += summarize(by_label[label], lambda r, lab=label: lab)
    write_summary_rows(out_dir / "ablate_lambda_summary.csv", lam_rows)
    return mu_records, lam_records


def cmd_sweep_eta(cfg: ExperimentConfig, out_dir, jobs: int = 1):
    """Controlled annotation-drop sweep: rows per (loss, eta), seeds averaged."""
    out_dir.mkdir(parents=True, exist_ok=True)
    tasks = [(cfg, loss, eta, 0, seed)
             for loss in cfg.losses
             for eta in cfg.eta_grid
             for seed in cfg.seeds]
    records = run_many(tasks, jobs=jobs)
    write_run_rows(out_dir / "sweep_eta_runs.csv", records)
    rows = summarize(records, lambda r: f"{r.loss}@eta={r.eta:g}")
    write_summary_rows(out_dir / "sweep_eta_summary.csv", rows)
    return records, rows


def cmd_export_figures(run_dir, out_dir, harmonizer: HarmonizerConfig | None = None):
    """Curve CSVs re-evaluated from a completed run's stored histograms."""
    hist2_path = run_dir / "gradient_hist_two_way.csv"
    if not hist2_path.exists():
        raise FileNotFoundError(f"missing training artifact {hist2_path}")
    out_dir.mkdir(parents=True, exist_ok=True)
    _, hists2 = load_histograms_csv(hist2_path)
    harmonizer = harmonizer or HarmonizerConfig()
    curves = {}
    curves["ce"] = reformulated_gradient_curve(LossSpec(kind="ce"))
    curves["focal"] = reformulated_gradient_curve(LossSpec(kind="focal"))
    ghm_spec = LossSpec(kind="ghm_c")
    pooled_counts = sum(h.counts for h in hists2.values())
    pooled = {Partition.POOLED: GradientHistogram(harmonizer.bin_count, pooled_counts)}
    curves["ghm_c"] = reformulated_gradient_curve(ghm_spec, histograms=pooled,
                                                  partition=Partition.POOLED)
    dghm_spec = LossSpec(kind="dghm_c", harmonizer=harmonizer)
    curves["dghm_c_clean"] = reformulated_gradient_curve(
        dghm_spec, histograms=hists2, partition=Partition.CLEAN)
    curves["dghm_c_noisy"] = reformulated_gradient_curve(
        dghm_spec, histograms=hists2, partition=Partition.NOISY)
    export_curves_csv(out_dir / "reformulated_gradient_curves.csv", curves)
    hist3_path = run_dir / "gradient_hist_three_way.csv"
    if hist3_path.exists():
        shutil.copy(hist3_path, out_dir / "gradient_hist_three_way.csv")
    shutil.copy(hist2_path, out_dir / "gradient_hist_two_way.csv")
    return out_dir / "reformulated_gradient_curves.csv"
