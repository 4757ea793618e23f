"""Vote counting over runs and methods, global ranking, reduced feature sets."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

METHOD_LABELS = {"shap": "SHAP", "gradcam": "Grad-CAM", "lime": "LIME"}


@dataclass
class VoteTable:
    methods: tuple
    counts: np.ndarray  # (n_methods, F) int
    n_runs: int
    k: int
    feature_names: list = None

    @property
    def totals(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    @property
    def n_features(self) -> int:
        return self.counts.shape[1]

    def names(self) -> list:
        if self.feature_names is not None:
            return list(self.feature_names)
        return [f"feature {i}" for i in range(self.n_features)]


@dataclass
class FeatureRanking:
    order: list  # feature indices, best first
    totals: np.ndarray  # indexed by feature
    tiebreak: np.ndarray  # indexed by feature

    def __len__(self):
        return len(self.order)


def vote(runs, n_features: int, k: int, methods=("shap", "gradcam", "lime"),
         feature_names=None) -> VoteTable:
    """Count how often each feature appears in each method's per-run top-k.

    ``runs`` is a sequence with one mapping ``method -> top-k index list`` per run.
    """
    methods = tuple(methods)
    counts = np.zeros((len(methods), n_features), dtype=int)
    for r, run in enumerate(runs):
        for m, method in enumerate(methods):
            if method not in run:
                raise ConfigError(f"run {r} has no entry for method {method!r}")
            chosen = [int(f) for f in run[method]]
            if len(chosen) != k:
                raise ConfigError(f"run {r}, {method}: expected {k} features, got {len(chosen)}")
            if len(set(chosen)) != k:
                raise ConfigError(f"run {r}, {method}: duplicate feature in {chosen}")
            if any(f < 0 or f >= n_features for f in chosen):
                raise ConfigError(f"run {r}, {method}: feature index out of range in {chosen}")
            counts[m, chosen] += 1
    return VoteTable(methods, counts, len(runs), k, feature_names)


def rank(table: VoteTable, tiebreak=None) -> FeatureRanking:
    """Order by total votes, then tie-break score (desc), then feature index."""
    totals = table.totals
    tb = np.zeros(table.n_features) if tiebreak is None else np.asarray(tiebreak, dtype=np.float64)
    if tb.shape != (table.n_features,):
        raise ConfigError("tie-break scores must cover every feature")
    order = sorted(range(table.n_features), key=lambda f: (-totals[f], -tb[f], f))
    return FeatureRanking(order, totals, tb)


def select_feature_sets(ranking: FeatureRanking, sizes=(9, 6)) -> list:
    """Ranking prefixes of the given (strictly decreasing) sizes."""
    sizes = [int(s) for s in sizes]
    if any(s < 1 or s > len(ranking) for s in sizes):
        raise ConfigError(f"feature set sizes {sizes} exceed the {len(ranking)} ranked features")
    if any(a <= b for a, b in zip(sizes, sizes[1:])):
        raise ConfigError(f"feature set sizes must be strictly decreasing, got {sizes}")
    return [list(ranking.order[:s]) for s in sizes]


def mean_normalized_importance(per_run_importances) -> np.ndarray:
    """Average of max-normalized importance vectors (runs x methods flattened)."""
    arr = np.asarray(per_run_importances, dtype=np.float64)
    arr = arr.reshape(-1, arr.shape[-1])
    peaks = arr.max(axis=1, keepdims=True)
    normed = np.divide(arr, peaks, out=np.zeros_like(arr), where=peaks > 0)
    return normed.mean(axis=0)


# ---------------------------------------------------------------------------
# files


def write_vote_table(table: VoteTable, ranking: FeatureRanking, path) -> Path:
    """Feature, Total and one column per method, rows in ranking order."""
    path = Path(path)
    names = table.names()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["Feature", "Index", "Total"] + [METHOD_LABELS.get(m, m) for m in table.methods])
        for f in ranking.order:
            w.writerow([names[f], f, int(table.totals[f])] + [int(c) for c in table.counts[:, f]])
    return path


def read_vote_table(path, n_runs: int, k: int) -> VoteTable:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing vote table {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    labels = header[3:]
    inverse = {v: kk for kk, v in METHOD_LABELS.items()}
    methods = tuple(inverse.get(lbl, lbl) for lbl in labels)
    F = len(body)
    counts = np.zeros((len(methods), F), dtype=int)
    names = [None] * F
    for row in body:
        f = int(row[1])
        names[f] = row[0]
        counts[:, f] = [int(v) for v in row[3:]]
    return VoteTable(methods, counts, n_runs, k, names)


def format_vote_table(table: VoteTable, ranking: FeatureRanking, limit: int = None) -> str:
    names = table.names()
    labels = [METHOD_LABELS.get(m, m) for m in table.methods]
    width = max(len("Feature"), *(len(n) for n in names))
    lines = ["  ".join([f"{'Feature':<{width}}", f"{'Total':>5}"] + [f"{lbl:>8}" for lbl in labels])]
    for f in ranking.order[:limit]:
        cells = [f"{names[f]:<{width}}", f"{int(table.totals[f]):>5}"]
        cells += [f"{int(c):>8}" for c in table.counts[:, f]]
        lines.append("  ".join(cells))
    return "\n".join(lines) + "\n"
