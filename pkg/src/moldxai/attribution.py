"""Post-hoc attribution for sequence classifiers.

All three methods explain the pre-sigmoid logit. ``expected_gradients`` and
``lime_timeseries`` only need a model object with ``logits(X)`` and
``logit_input_grads(X)``; ``grad_cam_recurrent`` needs the LSTM itself
because it reads hidden states.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import NormStats
from .errors import ConfigError, DataError
from .lstm import ModelParams, backward, forward
from .numerics import RngStream

METHODS = ("shap", "gradcam", "lime")


@dataclass
class AttributionMap:
    method: str
    values: np.ndarray  # (T, F); (1, F) for lime
    feature_importance: np.ndarray  # (F,)
    input_id: str = ""
    model_seed: int = 0
    meta: dict = field(default_factory=dict)


@dataclass
class BaselineSet:
    sequences: np.ndarray  # (B, T, F)
    seed: int = 0

    def __post_init__(self):
        self.sequences = np.asarray(self.sequences, dtype=np.float64)
        if self.sequences.ndim == 2:
            self.sequences = self.sequences[None]
        if len(self.sequences) == 0:
            raise ConfigError("baseline set is empty")


def draw_baselines(X_train, n: int = 32, seed: int = 0) -> BaselineSet:
    """Uniform draw (without replacement) of reference sequences from the training split."""
    X_train = np.asarray(X_train)
    if len(X_train) == 0:
        raise ConfigError("cannot draw baselines from an empty training split")
    n = min(n, len(X_train))
    idx = np.sort(RngStream(seed).derive("baselines").permutation(len(X_train))[:n])
    return BaselineSet(X_train[idx], seed)


def _stream(seed, method, input_id) -> RngStream:
    return RngStream(seed).derive(method).derive(str(input_id))


def collapse_to_feature(values) -> np.ndarray:
    """Mean absolute relevance over time, one score per feature."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[None]
    return np.abs(values).mean(axis=0)


def top_k(importance, k: int) -> list:
    """Indices of the k largest scores, descending; ties go to the lower index."""
    importance = np.asarray(importance, dtype=np.float64)
    F = importance.size
    if not 1 <= k <= F:
        raise ConfigError(f"k must be in [1, {F}], got {k}")
    order = sorted(range(F), key=lambda f: (-importance[f], f))
    return order[:k]


def time_binned_heatmap(values, n_bins: int = 20) -> np.ndarray:
    """Average relevance over contiguous equal-width time bins; the last bin takes the rest."""
    values = np.asarray(values, dtype=np.float64)
    T = values.shape[0]
    if not 1 <= n_bins <= T:
        raise ConfigError(f"n_bins must be in [1, T={T}], got {n_bins}")
    width = T // n_bins
    edges = [b * width for b in range(n_bins)] + [T]
    return np.stack([values[edges[b]:edges[b + 1]].mean(axis=0) for b in range(n_bins)])


def _stratified_draws(rng: RngStream, n_baselines: int, n_samples: int):
    """Baseline indices and interpolation points for expected gradients.

    Marginally each draw is a uniform baseline with alpha ~ U(0, 1), as in
    plain Monte Carlo. Baselines are used in balanced counts (remainder
    assigned at random) and the alphas of each baseline form an equispaced
    grid with one random shift (systematic sampling). Path integrands of a
    trained LSTM have narrow peaks where the path crosses the decision
    boundary; the shifted grid resolves them far better than i.i.d. draws.
    """
    reps, extra = divmod(n_samples, n_baselines)
    counts = np.full(n_baselines, reps)
    counts[rng.permutation(n_baselines)[:extra]] += 1
    idx = np.repeat(np.arange(n_baselines), counts)
    alpha = np.empty(n_samples)
    start = 0
    for c in counts:
        if c:
            alpha[start:start + c] = (np.arange(c) + rng.random()) / c
        start += c
    return idx, alpha


def expected_gradients(model, x, baselines: BaselineSet, n_samples: int = 200, seed: int = 0,
                       input_id: str = "") -> AttributionMap:
    """Expected-gradients attribution of the logit.

    Each sample picks a baseline b uniformly and alpha ~ U(0, 1), and
    contributes (x - b) * grad s(b + alpha (x - b)); the map is the sample
    mean. Draws are stratified (see ``_stratified_draws``).
    """
    if n_samples < 1:
        raise ConfigError("n_samples must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    B = baselines.sequences
    if B.shape[1:] != x.shape:
        raise ConfigError(f"baseline shape {B.shape[1:]} does not match input {x.shape}")
    rng = _stream(seed, "shap", input_id)
    idx, alpha = _stratified_draws(rng, len(B), n_samples)
    diff = x[None] - B[idx]
    _, grads = model.logit_input_grads(B[idx] + alpha[:, None, None] * diff)
    phi = (diff * grads).mean(axis=0)
    return AttributionMap("shap", phi, collapse_to_feature(phi), input_id,
                          getattr(model, "seed", 0),
                          {"n_samples": n_samples, "n_baselines": len(B), "seed": seed})


def grad_cam_recurrent(model: ModelParams, x, input_id: str = "") -> AttributionMap:
    """Gradient-weighted relevance over the last LSTM layer's hidden states.

    Channel weights are time-averaged logit gradients w.r.t. the hidden
    states; the temporal profile is ReLU of the weighted activations,
    scaled to max 1. Per-feature maps gate input saliency |ds/dx| with
    that profile.
    """
    x = np.asarray(x, dtype=np.float64)
    _, cache = forward(x[None], model)
    grads = backward(cache, model, target="logit")
    h = cache.layers[-1].h[0]  # (T, K)
    dh = grads.dh[-1][0]
    alpha = dh.mean(axis=0)
    m_raw = np.maximum(h @ alpha, 0.0)
    peak = m_raw.max()
    m = m_raw / peak if peak > 0 else m_raw
    R = m[:, None] * np.abs(grads.dx[0])
    return AttributionMap("gradcam", R, collapse_to_feature(R), input_id, model.seed,
                          {"temporal_profile": m.tolist(), "channel_weights": alpha.tolist(),
                           "profile_peak": float(peak)})


def lime_timeseries(model, x, stats: NormStats, n_perturb: int = 1000, ridge: float = 1e-3,
                    kernel_width: float = None, seed: int = 0, input_id: str = "") -> AttributionMap:
    """Local linear surrogate over time-averaged channels.

    Perturbations are drawn around the channel means with per-feature scale
    ``stats.std`` and pushed back into the sequence as constant channel
    offsets. The surrogate is a weighted ridge fit of the logit on the
    standardized perturbations with exponential kernel weights.
    """
    x = np.asarray(x, dtype=np.float64)
    T, F = x.shape
    if n_perturb < F + 2:
        raise ConfigError(f"n_perturb must be >= F + 2 = {F + 2}")
    sigma = np.asarray(stats.std, dtype=np.float64)
    if sigma.shape != (F,):
        raise ConfigError(f"stats cover {sigma.shape} features, input has {F}")
    if kernel_width is None:
        kernel_width = 0.75 * np.sqrt(F)
    rng = _stream(seed, "lime", input_id)
    eps = rng.normal(size=(n_perturb, F))
    offsets = eps * sigma
    s = model.logits(x[None] + offsets[:, None, :])

    w = np.exp(-np.sum(eps * eps, axis=1) / kernel_width ** 2)
    wsum = w.sum()
    e_mean = w @ eps / wsum
    s_mean = w @ s / wsum
    Ec = eps - e_mean
    sc = s - s_mean
    A = (Ec * w[:, None]).T @ Ec + ridge * np.eye(F)
    coef = np.linalg.solve(A, (Ec * w[:, None]).T @ sc)
    resid = sc - Ec @ coef
    ss_tot = w @ (sc * sc)
    r2 = 1.0 - (w @ (resid * resid)) / ss_tot if ss_tot > 0 else 1.0
    values = coef[None, :]
    return AttributionMap("lime", values, collapse_to_feature(values), input_id,
                          getattr(model, "seed", 0),
                          {"intercept": float(s_mean - e_mean @ coef), "r2": float(r2),
                           "kernel_width": float(kernel_width), "ridge": ridge,
                           "n_perturb": n_perturb, "seed": seed})


def explain(model, x, method: str, *, baselines: BaselineSet = None, stats: NormStats = None,
            seed: int = 0, input_id: str = "", eg_samples: int = 200, lime_perturb: int = 1000,
            lime_ridge: float = 1e-3, lime_kernel_width: float = None) -> AttributionMap:
    """Dispatch to one method by name."""
    if method == "shap":
        if baselines is None:
            raise ConfigError("expected gradients need a baseline set")
        return expected_gradients(model, x, baselines, eg_samples, seed, input_id)
    if method == "gradcam":
        return grad_cam_recurrent(model, x, input_id)
    if method == "lime":
        if stats is None:
            raise ConfigError("lime needs perturbation scales (NormStats)")
        return lime_timeseries(model, x, stats, lime_perturb, lime_ridge, lime_kernel_width,
                               seed, input_id)
    raise ConfigError(f"unknown method {method!r}; valid methods: {', '.join(METHODS)}")


def normalized_importance(importance) -> np.ndarray:
    """Importance divided by its maximum (all zeros stay zeros)."""
    importance = np.asarray(importance, dtype=np.float64)
    peak = importance.max() if importance.size else 0.0
    return importance / peak if peak > 0 else np.zeros_like(importance)


# ---------------------------------------------------------------------------
# files: <stem>.csv (map), <stem>.json (sidecar), <stem>.heatmap.csv


def save_attribution(amap: AttributionMap, directory, feature_names, n_bins: int = 20,
                     extra: dict = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = f"{amap.input_id}.{amap.method}"
    header = ",".join(feature_names)
    np.savetxt(directory / f"{stem}.csv", amap.values, delimiter=",", header=header,
               comments="", fmt="%.17g")
    n_bins = min(n_bins, amap.values.shape[0])
    heat = time_binned_heatmap(amap.values, n_bins)
    np.savetxt(directory / f"{stem}.heatmap.csv", heat, delimiter=",", header=header,
               comments="", fmt="%.17g")
    side = {"method": amap.method, "input_id": amap.input_id, "model_seed": amap.model_seed,
            "feature_names": list(feature_names),
            "feature_importance": amap.feature_importance.tolist(), "meta": amap.meta,
            "n_bins": n_bins}
    if extra:
        side.update(extra)
    (directory / f"{stem}.json").write_text(json.dumps(side, indent=1))
    return directory / f"{stem}.csv"


def load_attribution(csv_path) -> AttributionMap:
    csv_path = Path(csv_path)
    side_path = csv_path.with_suffix(".json")
    if not csv_path.is_file() or not side_path.is_file():
        raise DataError(f"missing attribution file {csv_path} or its sidecar")
    side = json.loads(side_path.read_text())
    values = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
    return AttributionMap(side["method"], values, np.asarray(side["feature_importance"]),
                          side["input_id"], side["model_seed"], side.get("meta", {}))


def render_heatmap_svg(heat, feature_names, path, title: str = "") -> Path:
    """Minimal static SVG of an (n_bins, F) heatmap; rows are features."""
    heat = np.asarray(heat, dtype=np.float64)
    n_bins, F = heat.shape
    cell_w, cell_h, left, top = 18, 14, 190, 24
    lo, hi = float(heat.min()), float(heat.max())
    span = hi - lo if hi > lo else 1.0
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{left + n_bins * cell_w + 10}" '
             f'height="{top + F * cell_h + 10}" font-family="sans-serif" font-size="10">',
             f'<text x="4" y="14">{title}</text>']
    for f in range(F):
        y = top + f * cell_h
        parts.append(f'<text x="4" y="{y + 10}">{feature_names[f]}</text>')
        for b in range(n_bins):
            v = (heat[b, f] - lo) / span
            r, g, bl = int(255 * v), int(64 + 96 * (1 - abs(2 * v - 1))), int(255 * (1 - v))
            parts.append(f'<rect x="{left + b * cell_w}" y="{y}" width="{cell_w}" '
                         f'height="{cell_h}" fill="rgb({r},{g},{bl})"/>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts))
    return Path(path)
