"""Multi-seed retraining on feature subsets: accuracy/F1 statistics and latency."""

from __future__ import annotations

import csv
import dataclasses
import gc
import json
import logging
import resource
import sys
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .lstm import ModelParams, TrainConfig, evaluate, infer_logits, train

log = logging.getLogger(__name__)

REPORT_VERSION = 1


@dataclass
class ExperimentConfig:
    feature_sets: dict  # name -> list of channel indices
    train_config: TrainConfig
    seeds: list = field(default_factory=lambda: list(range(10)))
    timing_repeats: int = 5
    warmup: int = 1
    timing_batch: int = 512
    fingerprint: str = ""

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("need at least one seed (n_runs >= 1)")
        if self.timing_repeats < 1:
            raise ConfigError("timing_repeats must be >= 1")
        for name, fs in self.feature_sets.items():
            if not fs:
                raise ConfigError(f"feature set {name!r} is empty")


@dataclass
class RunRecord:
    seed: int
    accuracy: float = None
    f1: float = None
    inference_times: list = None
    inference_mean: float = None
    error: str = None


@dataclass
class SetSummary:
    name: str
    features: list
    feature_names: list
    accuracy_mean: float = None
    accuracy_std: float = None
    f1_mean: float = None
    f1_std: float = None
    inference_mean: float = None
    complete: bool = True
    runs: list = field(default_factory=list)


@dataclass
class BenchmarkReport:
    sets: list
    fingerprint: str = ""
    peak_memory_mb: float = None
    memory_note: str = ("process peak resident set size; not comparable to GPU VRAM figures")
    version: int = REPORT_VERSION

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d) -> "BenchmarkReport":
        sets = []
        for s in d["sets"]:
            s = dict(s)
            s["runs"] = [RunRecord(**r) for r in s["runs"]]
            sets.append(SetSummary(**s))
        return cls(sets, d.get("fingerprint", ""), d.get("peak_memory_mb"),
                   d.get("memory_note", ""), d.get("version", REPORT_VERSION))

    def metric_view(self) -> list:
        """Everything except timing and memory, for determinism comparisons."""
        out = []
        for s in self.sets:
            out.append((s.name, tuple(s.features), s.accuracy_mean, s.accuracy_std, s.f1_mean,
                        s.f1_std, s.complete,
                        tuple((r.seed, r.accuracy, r.f1, r.error) for r in s.runs)))
        return out


def mean_std(values) -> tuple:
    """Mean and population standard deviation (0 for a single value)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return None, None
    return float(arr.mean()), float(arr.std())


def restrict(X, feature_subset) -> np.ndarray:
    """Copy of ``X`` holding only the listed channels, in the listed order."""
    return np.ascontiguousarray(np.asarray(X)[..., list(feature_subset)])


def measure_inference(model: ModelParams, X, repeats: int = 5, warmup: int = 1,
                      batch_size: int = 512):
    """Seconds per inference pass over every sequence in ``X``.

    ``warmup`` passes are run first and discarded. Garbage collection is
    paused while timing, as ``timeit`` does. Returns (mean, per-repeat list).
    """
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    X = np.asarray(X, dtype=np.float64)
    if len(X) == 0:
        raise ConfigError("cannot time inference on an empty dataset")

    def one_pass():
        for i in range(0, len(X), batch_size):
            infer_logits(X[i:i + batch_size], model)

    for _ in range(warmup):
        one_pass()
    times = []
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        for _ in range(repeats):
            t0 = time.perf_counter()
            one_pass()
            times.append(time.perf_counter() - t0)
    finally:
        if gc_was_enabled:
            gc.enable()
    return float(np.mean(times)), times


def _peak_memory_mb() -> float:
    rss = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    # kilobytes on Linux, bytes on macOS
    return rss / (1024.0 * 1024.0) if sys.platform == "darwin" else rss / 1024.0


def run_experiment(train_X, train_y, val_X, val_y, config: ExperimentConfig, feature_names=None,
                   train_ids=None, pretrained: dict = None, on_model=None) -> BenchmarkReport:
    """Train, evaluate and time one model per (feature set, seed).

    Inputs hold all channels; each run sees only its subset. ``pretrained``
    maps (set name, seed) to an already trained model to reuse. ``on_model``
    is called with (set name, seed, model, history) after every training.
    Timing covers train + validation sequences and runs after all training
    is finished. A failing run is recorded with its error and marks the set
    incomplete.
    """
    pretrained = pretrained or {}
    all_X = np.concatenate([train_X, val_X])
    summaries = []
    models = {}
    for name, subset in config.feature_sets.items():
        subset = [int(f) for f in subset]
        names = [feature_names[f] for f in subset] if feature_names else None
        summary = SetSummary(name, subset, names)
        Xtr, Xva = restrict(train_X, subset), restrict(val_X, subset)
        for seed in config.seeds:
            rec = RunRecord(seed=int(seed))
            try:
                model = pretrained.get((name, seed))
                if model is None:
                    tc = dataclasses.replace(config.train_config, seed=int(seed))
                    model, history = train(Xtr, train_y, Xva, val_y, tc, feature_subset=subset,
                                           feature_names=names, ids=train_ids)
                    if on_model is not None:
                        on_model(name, seed, model, history)
                if list(model.feature_subset) != subset:
                    raise ConfigError(f"model for {name!r} consumes {model.feature_subset}, "
                                      f"expected {subset}")
                m = evaluate(model, Xva, val_y, config.train_config.positive_label)
                rec.accuracy, rec.f1 = m.accuracy, m.f1
                models[(name, seed)] = model
            except Exception as exc:  # recorded, never aborts the experiment
                rec.error = f"{type(exc).__name__}: {exc}"
                log.warning("run %s seed %s failed: %s", name, seed, rec.error)
                log.debug("%s", traceback.format_exc())
                summary.complete = False
            summary.runs.append(rec)
        summaries.append(summary)

    # timing runs after all training; repeats go round-robin over every model,
    # starting one place later each round, so drift in machine load spreads
    # evenly across feature sets
    timed = []
    for summary in summaries:
        Xall = restrict(all_X, summary.features)
        for rec in summary.runs:
            model = models.get((summary.name, rec.seed))
            if model is not None:
                measure_inference(model, Xall, 1, config.warmup, config.timing_batch)
                rec.inference_times = []
                timed.append((rec, model, Xall))
    for r in range(config.timing_repeats):
        shift = (r * len(timed)) // config.timing_repeats
        for rec, model, Xall in timed[shift:] + timed[:shift]:
            rec.inference_times.append(
                measure_inference(model, Xall, 1, 0, config.timing_batch)[1][0])
    for rec, _, _ in timed:
        rec.inference_mean = float(np.mean(rec.inference_times))
    for summary in summaries:
        ok = [r for r in summary.runs if r.error is None]
        summary.accuracy_mean, summary.accuracy_std = mean_std([r.accuracy for r in ok])
        summary.f1_mean, summary.f1_std = mean_std([r.f1 for r in ok])
        summary.inference_mean = mean_std([r.inference_mean for r in ok])[0]
    return BenchmarkReport(summaries, config.fingerprint, _peak_memory_mb())


# ---------------------------------------------------------------------------
# report files: report.json, tables.txt, runs.csv


def _pct(v):
    return "-" if v is None else f"{100.0 * v:.2f}"


def format_tables(report: BenchmarkReport) -> str:
    lines = ["Validation accuracy and F1 (mean, std. dev. over runs, percent)",
             f"{'Model':<14}{'Val. Acc.':>10}{'SD Acc':>9}{'F1 Score':>10}{'SD F1':>8}  Runs"]
    for s in report.sets:
        n_ok = sum(r.error is None for r in s.runs)
        flag = "" if s.complete else "  INCOMPLETE"
        lines.append(f"{s.name:<14}{_pct(s.accuracy_mean):>10}{_pct(s.accuracy_std):>9}"
                     f"{_pct(s.f1_mean):>10}{_pct(s.f1_std):>8}  {n_ok}/{len(s.runs)}{flag}")
    lines += ["", "Inference time over train + validation data",
              f"{'Model':<14}{'Mean inference Time (s)':>24}"]
    for s in report.sets:
        t = "-" if s.inference_mean is None else f"{s.inference_mean:.4f}"
        lines.append(f"{s.name:<14}{t:>24}")
    if report.peak_memory_mb is not None:
        lines += ["", f"Peak memory: {report.peak_memory_mb:.1f} MB ({report.memory_note})"]
    lines += ["", f"config fingerprint: {report.fingerprint}"]
    return "\n".join(lines) + "\n"


def emit_report(report: BenchmarkReport, directory) -> bool:
    """Write the report files. Returns False when there is no run data at all."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "report.json").write_text(json.dumps(report.to_dict(), indent=1))
        (directory / "tables.txt").write_text(format_tables(report))
        with open(directory / "runs.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["set", "n_features", "seed", "accuracy", "f1", "inference_mean",
                        "inference_times", "error"])
            for s in report.sets:
                for r in s.runs:
                    times = "" if r.inference_times is None else " ".join(repr(t) for t in r.inference_times)
                    w.writerow([s.name, len(s.features), r.seed, _csv(r.accuracy), _csv(r.f1),
                                _csv(r.inference_mean), times, r.error or ""])
    except OSError as exc:
        raise DataError(f"cannot write report to {directory}: {exc}") from exc
    return any(s.runs for s in report.sets)


def _csv(v):
    return "" if v is None else repr(v)


def load_report(directory) -> BenchmarkReport:
    path = Path(directory) / "report.json"
    if not path.is_file():
        raise DataError(f"missing report {path}")
    d = json.loads(path.read_text())
    if d.get("version") != REPORT_VERSION:
        raise DataError(f"{path}: unsupported report version {d.get('version')}")
    return BenchmarkReport.from_dict(d)
