"""Stage functions wiring the modules together; the CLI is a thin shell over these."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import aggregation as agg
from .attribution import (METHODS, BaselineSet, draw_baselines, explain, normalized_importance,
                          save_attribution, time_binned_heatmap, top_k, render_heatmap_svg)
from .benchmark import ExperimentConfig, emit_report, restrict, run_experiment
from .config import PipelineConfig
from .data import (Dataset, NormStats, augment_dataset, channel_means, compute_norm_stats,
                   generate_cycles, load_dataset, normalize, save_dataset, split)
from .errors import ConfigError, DataError
from .lstm import ModelParams, evaluate, load_model, save_model, train

log = logging.getLogger(__name__)


def generate(cfg: PipelineConfig) -> Dataset:
    """Synthetic source cycles -> stride augmentation -> fold assignment."""
    d = cfg.dataset
    src = generate_cycles(d.n_source, d.T_source, d.n_features, d.causal, d.noise, d.balance,
                          d.seed, d.margin)
    aug = augment_dataset(src, d.augment_phases)
    tr, va = split(aug, d.val_ratio, d.split_seed, d.group_by_source)
    return Dataset(tr.cycles + va.cycles, aug.schema)


def write_dataset(cfg: PipelineConfig, ds: Dataset, out_dir) -> Path:
    return save_dataset(ds, out_dir, {"config_fingerprint": cfg.fingerprint()})


@dataclass
class Splits:
    train: Dataset
    val: Dataset
    stats: NormStats  # per-time-step channel scaling (raw units)
    fingerprint: str = None

    @property
    def feature_names(self):
        return list(self.train.schema.channel_names)


def prepare_splits(ds: Dataset, fingerprint: str = None) -> Splits:
    """Normalized train/validation splits from the folds stored with the data."""
    tr, va = ds.subset("train"), ds.subset("val")
    if len(tr) == 0 or len(va) == 0:
        raise DataError("dataset has no train/val fold assignment (run generate first)")
    tr, va, stats = normalize(tr, va)
    return Splits(tr, va, stats, fingerprint)


def load_splits(data_dir) -> Splits:
    ds = load_dataset(data_dir)
    manifest = json.loads((Path(data_dir) / "manifest.json").read_text())
    return prepare_splits(ds, manifest.get("config_fingerprint"))


def check_fingerprint(cfg: PipelineConfig, found, what: str) -> None:
    if found is not None and found != cfg.fingerprint():
        raise ConfigError(f"{what} was produced with config fingerprint {found}, "
                          f"current config is {cfg.fingerprint()}")


def train_model(cfg: PipelineConfig, splits: Splits, seed: int = None, feature_subset=None):
    """Train one model on ``feature_subset`` (default: every channel)."""
    F = splits.train.schema.n_channels
    subset = list(range(F)) if feature_subset is None else [int(f) for f in feature_subset]
    tc = cfg.train.to_train_config(seed)
    names = [splits.feature_names[f] for f in subset]
    model, history = train(restrict(splits.train.X, subset), splits.train.y,
                           restrict(splits.val.X, subset), splits.val.y, tc,
                           feature_subset=subset, feature_names=names, ids=splits.train.ids)
    model.norm_mean = splits.stats.mean[subset].copy()
    model.norm_std = splits.stats.std[subset].copy()
    return model, history


def lime_scales(splits: Splits, subset) -> NormStats:
    """Spread of time-averaged channels across training cycles (LIME perturbation scale)."""
    return compute_norm_stats(channel_means(restrict(splits.train.X, subset))[:, None, :])


@dataclass
class RunExplanation:
    seed: int
    importance: dict  # method -> mean importance over explained cycles (model features)
    maps: dict  # method -> list of AttributionMap
    cycle_ids: list

    def top_k(self, k: int, feature_subset) -> dict:
        return {m: [feature_subset[f] for f in top_k(v, k)] for m, v in self.importance.items()}


def explain_run(cfg: PipelineConfig, model: ModelParams, splits: Splits, methods=None,
                cycle_ids=None) -> RunExplanation:
    """Attribute every selected validation cycle with each method, average importances."""
    methods = list(methods or cfg.attribution.methods)
    a = cfg.attribution
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise ConfigError(f"unknown method(s) {bad}; valid methods: {', '.join(METHODS)}")
    subset = model.feature_subset
    val = splits.val
    if cycle_ids is not None:
        wanted = set(cycle_ids)
        chosen = [c for c in val.cycles if c.id in wanted]
        missing = wanted - {c.id for c in chosen}
        if missing:
            raise DataError(f"unknown validation cycle id(s): {sorted(missing)}")
    else:
        chosen = sorted(val.cycles, key=lambda c: c.id)
        if a.max_explain is not None:
            chosen = chosen[:a.max_explain]
    baselines = draw_baselines(restrict(splits.train.X, subset), a.eg_baselines, a.seed)
    scales = lime_scales(splits, subset)
    maps = {m: [] for m in methods}
    for c in chosen:
        x = restrict(c.values, subset)
        for m in methods:
            maps[m].append(explain(model, x, m, baselines=baselines, stats=scales, seed=a.seed,
                                   input_id=c.id, eg_samples=a.eg_samples,
                                   lime_perturb=a.lime_perturb, lime_ridge=a.lime_ridge,
                                   lime_kernel_width=a.lime_kernel_width))
    importance = {m: np.mean([am.feature_importance for am in maps[m]], axis=0) for m in methods}
    return RunExplanation(model.seed, importance, maps, [c.id for c in chosen])


def write_explanation(cfg: PipelineConfig, run: RunExplanation, model: ModelParams, out_dir,
                      svg: bool = False) -> Path:
    """Per-map files plus ``summary.json`` (the input of the reduce stage)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = model.feature_names or [str(f) for f in model.feature_subset]
    fp = cfg.fingerprint()
    for m, maps in run.maps.items():
        for am in maps:
            save_attribution(am, out_dir, names, cfg.attribution.n_bins,
                             {"config_fingerprint": fp})
        if svg and maps:
            n_bins = min(cfg.attribution.n_bins, maps[0].values.shape[0])
            mean_heat = np.mean([time_binned_heatmap(np.abs(am.values), n_bins) for am in maps],
                                axis=0)
            render_heatmap_svg(mean_heat, names, out_dir / f"heatmap.{m}.svg", m)
    summary = {
        "config_fingerprint": fp,
        "model_seed": run.seed,
        "feature_subset": model.feature_subset,
        "feature_names": names,
        "cycle_ids": run.cycle_ids,
        "importance": {m: v.tolist() for m, v in run.importance.items()},
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=1))
    return out_dir


def read_explanation(run_dir) -> dict:
    path = Path(run_dir) / "summary.json"
    if not path.is_file():
        raise DataError(f"missing attribution summary {path}")
    return json.loads(path.read_text())


@dataclass
class Reduction:
    table: agg.VoteTable
    ranking: agg.FeatureRanking
    feature_sets: list


def reduce_runs(cfg: PipelineConfig, summaries: list, feature_names, methods=None) -> Reduction:
    """Vote over per-run top-k lists, rank, cut nested feature sets.

    ``summaries`` are dicts shaped like ``summary.json``; importances are in
    the model's own feature order and get mapped back to channel indices.
    """
    methods = list(methods or cfg.attribution.methods)
    F = len(feature_names)
    k = cfg.aggregation.k
    runs, normed = [], []
    for s in summaries:
        subset = s["feature_subset"]
        run = {}
        for m in methods:
            if m not in s["importance"]:
                raise DataError(f"run with seed {s.get('model_seed')} lacks method {m!r}")
            full = np.zeros(F)
            full[subset] = s["importance"][m]
            run[m] = top_k(full, k)
            normed.append(normalized_importance(full))
        runs.append(run)
    table = agg.vote(runs, F, k, methods, list(feature_names))
    tiebreak = np.mean(normed, axis=0) if normed else np.zeros(F)
    ranking = agg.rank(table, tiebreak)
    sets = agg.select_feature_sets(ranking, cfg.aggregation.sizes)
    return Reduction(table, ranking, sets)


def write_reduction(cfg: PipelineConfig, red: Reduction, out_dir) -> list:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    agg.write_vote_table(red.table, red.ranking, out_dir / "votes.csv")
    (out_dir / "votes.txt").write_text(agg.format_vote_table(red.table, red.ranking))
    names = red.table.names()
    ranking = [{"rank": r + 1, "index": f, "feature": names[f], "total": int(red.ranking.totals[f]),
                "tiebreak": float(red.ranking.tiebreak[f])} for r, f in enumerate(red.ranking.order)]
    (out_dir / "ranking.json").write_text(json.dumps(
        {"config_fingerprint": cfg.fingerprint(), "n_runs": red.table.n_runs,
         "k": red.table.k, "ranking": ranking}, indent=1))
    paths = []
    for fs in red.feature_sets:
        p = out_dir / f"feature_set_{len(fs)}.json"
        p.write_text(json.dumps({"config_fingerprint": cfg.fingerprint(), "name": f"{len(fs)} Features",
                                 "features": fs, "feature_names": [names[f] for f in fs]}, indent=1))
        paths.append(p)
    return paths


def read_feature_set(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing feature-set file {path}")
    d = json.loads(path.read_text())
    if "features" not in d:
        raise DataError(f"{path}: no 'features' list")
    return d


def experiment_config(cfg: PipelineConfig, feature_sets: dict) -> ExperimentConfig:
    b = cfg.benchmark
    return ExperimentConfig(feature_sets, cfg.train.to_train_config(), b.seed_list(),
                            b.timing_repeats, b.warmup, b.timing_batch, cfg.fingerprint())


def benchmark(cfg: PipelineConfig, splits: Splits, feature_sets: dict, pretrained=None,
              on_model=None):
    exp = experiment_config(cfg, feature_sets)
    return run_experiment(splits.train.X, splits.train.y, splits.val.X, splits.val.y, exp,
                          splits.feature_names, splits.train.ids, pretrained, on_model)


def run_all(cfg: PipelineConfig, workdir, log_fn=print) -> dict:
    """generate -> train x n_runs -> explain -> reduce -> benchmark {full, sizes...}."""
    workdir = Path(workdir)
    ds = generate(cfg)
    write_dataset(cfg, ds, workdir / "data")
    splits = prepare_splits(ds, cfg.fingerprint())
    F = ds.schema.n_channels
    full_name = f"{F} Features"
    models, summaries, histories = {}, [], {}
    for seed in cfg.benchmark.seed_list():
        model, history = train_model(cfg, splits, seed)
        (workdir / "models").mkdir(parents=True, exist_ok=True)
        save_model(model, workdir / "models" / f"full_seed{seed}.npz")
        models[(full_name, seed)] = model
        histories[seed] = history
        run = explain_run(cfg, model, splits)
        write_explanation(cfg, run, model, workdir / "explain" / f"seed{seed}")
        summaries.append(read_explanation(workdir / "explain" / f"seed{seed}"))
        log_fn(f"seed {seed}: val acc {history[-1]['val_accuracy'] if history else float('nan'):.3f}")
    red = reduce_runs(cfg, summaries, splits.feature_names)
    write_reduction(cfg, red, workdir / "reduce")
    sets = {full_name: list(range(F))}
    for fs in red.feature_sets:
        sets[f"{len(fs)} Features"] = sorted(fs)
    report = benchmark(cfg, splits, sets, pretrained=models)
    emit_report(report, workdir / "benchmark")
    return {"splits": splits, "models": models, "histories": histories, "summaries": summaries,
            "reduction": red, "report": report}
