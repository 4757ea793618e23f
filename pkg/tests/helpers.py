"""Shared builders for the vote-table tests."""

import numpy as np

from moldxai.data import DEFAULT_CHANNELS

FEATURE_NAMES = [name for name, _ in DEFAULT_CHANNELS]
METHODS = ("shap", "gradcam", "lime")

# published per-method counts for the nine top-ranked channels (10 runs)
PUBLISHED_VOTES = {
    "Injection Pressure": (9, 7, 10),
    "Actual Clamping Force": (10, 3, 8),
    "Screw Position": (6, 8, 7),
    "End of Ejection Position": (10, 3, 4),
    "Screw Torque": (8, 2, 5),
    "Mold Position": (8, 2, 2),
    "Screw Speed": (3, 7, 5),
    "Contact Force": (0, 5, 4),
    "Screw Velocity": (0, 5, 3),
}
PUBLISHED_TOTALS = (26, 21, 21, 17, 15, 12, 11, 9, 8)
# the published Screw Speed row lists 3 + 7 + 5 = 15 votes next to a Total of 11;
# every other row sums to its Total
INCONSISTENT_ROWS = {"Screw Speed"}


def published_total_table():
    """VoteTable holding the published Total column as a single count row."""
    from moldxai.aggregation import VoteTable

    counts = np.zeros((1, len(FEATURE_NAMES)), dtype=int)
    for name, total in zip(PUBLISHED_VOTES, PUBLISHED_TOTALS):
        counts[0, FEATURE_NAMES.index(name)] = total
    return VoteTable(("total",), counts, 10, 6, FEATURE_NAMES)


def lists_from_counts(counts, n_runs):
    """Per-run lists realising ``counts`` (feature -> appearances).

    Features are laid out in order, each repeated ``count`` times, and entry
    ``i`` of that sequence goes to run ``i mod n_runs``. A count never exceeds
    ``n_runs``, so no run receives a feature twice.
    """
    seq = [f for f in sorted(counts, key=lambda f: (-counts[f], f)) for _ in range(counts[f])]
    if len(seq) % n_runs:
        raise ValueError("counts must sum to a multiple of n_runs")
    runs = [[] for _ in range(n_runs)]
    for i, f in enumerate(seq):
        runs[i % n_runs].append(f)
    return runs


def published_votes_runs(k=6, n_runs=10):
    """Mock per-run top-k lists whose counts reproduce the published table.

    The published rows do not fill 10 x 6 slots per method; the remainder
    goes to the ten unranked channels, at most 2 per method each so none of
    them reaches the ninth-ranked total of 8.
    """
    F = len(FEATURE_NAMES)
    ranked = [FEATURE_NAMES.index(n) for n in PUBLISHED_VOTES]
    others = [f for f in range(F) if f not in ranked]
    per_method = []
    for m in range(len(METHODS)):
        counts = {f: PUBLISHED_VOTES[FEATURE_NAMES[f]][m] for f in ranked}
        missing = n_runs * k - sum(counts.values())
        for j, f in enumerate(others):
            counts[f] = missing // len(others) + (1 if j < missing % len(others) else 0)
        assert max(counts.values()) <= n_runs
        per_method.append(lists_from_counts(counts, n_runs))
    return [{m: per_method[i][r] for i, m in enumerate(METHODS)} for r in range(n_runs)]


def random_runs(rng, n_runs, n_features, k, methods=METHODS):
    return [{m: rng.permutation(n_features)[:k].tolist() for m in methods} for _ in range(n_runs)]


def brute_force_counts(runs, n_features, methods=METHODS):
    out = np.zeros((len(methods), n_features), dtype=int)
    for run in runs:
        for i, m in enumerate(methods):
            for f in range(n_features):
                out[i, f] += sum(1 for g in run[m] if g == f)
    return out
