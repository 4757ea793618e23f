"""Pipeline configuration: one JSON file, section per module, desk/paper presets.

Every key has a default (see the dataclasses below). Unknown keys are
rejected. ``fingerprint`` hashes the resolved configuration, minus the
per-run training seed, and is written into every output.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .lstm import TrainConfig


@dataclass
class DatasetSection:
    n_source: int = 1171  # source cycles before augmentation
    T_source: int = 1800  # time steps per source cycle
    n_features: int = 19
    causal: list = field(default_factory=lambda: [0, 1, 2])
    noise: float = 0.05
    balance: float = 0.5  # expected share of label 1
    margin: float = 0.3
    seed: int = 0
    augment_phases: int = 4
    val_ratio: float = 0.33
    split_seed: int = 0
    group_by_source: bool = False


@dataclass
class TrainSection:
    hidden_sizes: list = field(default_factory=lambda: [300, 100, 100])
    learning_rate: float = 0.001325
    batch_size: int = 64
    epochs: int = 350
    dropout_hidden: float = 0.20181
    dropout_last: float = 0.17249
    seed: int = 0
    metrics_every: int = 1
    positive_label: int = 1

    def to_train_config(self, seed: int = None) -> TrainConfig:
        d = dataclasses.asdict(self)
        if seed is not None:
            d["seed"] = seed
        return TrainConfig(**d)


@dataclass
class AttributionSection:
    methods: list = field(default_factory=lambda: ["shap", "gradcam", "lime"])
    eg_samples: int = 200
    eg_baselines: int = 32
    lime_perturb: int = 1000
    lime_ridge: float = 1e-3
    lime_kernel_width: float = None  # None -> 0.75 * sqrt(F)
    n_bins: int = 20
    max_explain: int = None  # None -> every validation cycle
    seed: int = 0


@dataclass
class AggregationSection:
    k: int = 6
    sizes: list = field(default_factory=lambda: [9, 6])


@dataclass
class BenchmarkSection:
    n_runs: int = 10
    seeds: list = None  # None -> 0 .. n_runs-1
    timing_repeats: int = 5
    warmup: int = 1
    timing_batch: int = 512

    def seed_list(self) -> list:
        return list(self.seeds) if self.seeds is not None else list(range(self.n_runs))


SECTIONS = {
    "dataset": DatasetSection,
    "train": TrainSection,
    "attribution": AttributionSection,
    "aggregation": AggregationSection,
    "benchmark": BenchmarkSection,
}

PROFILES = {
    "paper": {},
    "desk": {
        "dataset": {"n_source": 100, "T_source": 480},
        "train": {"hidden_sizes": [32, 16, 16], "epochs": 50, "metrics_every": 5},
        "attribution": {"max_explain": 16},
    },
}


@dataclass
class PipelineConfig:
    profile: str = "desk"
    dataset: DatasetSection = field(default_factory=DatasetSection)
    train: TrainSection = field(default_factory=TrainSection)
    attribution: AttributionSection = field(default_factory=AttributionSection)
    aggregation: AggregationSection = field(default_factory=AggregationSection)
    benchmark: BenchmarkSection = field(default_factory=BenchmarkSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def fingerprint(self) -> str:
        d = self.to_dict()
        d["train"].pop("seed")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def validate(self) -> None:
        ds = self.dataset
        if ds.n_source < 2:
            raise ConfigError("dataset.n_source must be >= 2")
        if ds.T_source < ds.augment_phases or ds.augment_phases < 1:
            raise ConfigError("dataset.T_source must be >= dataset.augment_phases >= 1")
        bad = [c for c in ds.causal if not 0 <= int(c) < ds.n_features]
        if bad or len(set(ds.causal)) != len(ds.causal) or not 1 <= len(ds.causal) <= 3:
            raise ConfigError(f"dataset.causal: invalid causal channel indices {ds.causal}")
        if not 0 < ds.val_ratio < 1:
            raise ConfigError("dataset.val_ratio must lie in (0, 1)")
        if not 0 < ds.balance < 1:
            raise ConfigError("dataset.balance must lie in (0, 1)")
        try:
            self.train.to_train_config()
        except ConfigError as exc:
            raise ConfigError(f"train: {exc}") from exc
        from .attribution import METHODS

        unknown = [m for m in self.attribution.methods if m not in METHODS]
        if unknown:
            raise ConfigError(f"attribution.methods: unknown {unknown}; valid: {list(METHODS)}")
        if not 1 <= self.aggregation.k <= ds.n_features:
            raise ConfigError("aggregation.k must lie in [1, dataset.n_features]")
        sizes = self.aggregation.sizes
        if any(s < 1 or s > ds.n_features for s in sizes) or any(a <= b for a, b in zip(sizes, sizes[1:])):
            raise ConfigError(f"aggregation.sizes must be strictly decreasing and <= n_features: {sizes}")
        b = self.benchmark
        if b.n_runs < 1 or b.timing_repeats < 1 or b.warmup < 0:
            raise ConfigError("benchmark: n_runs and timing_repeats must be >= 1, warmup >= 0")
        if b.seeds is not None and len(b.seeds) != b.n_runs:
            raise ConfigError("benchmark.seeds must have n_runs entries")


def _merge(base: dict, override: dict, where: str) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in out:
            raise ConfigError(f"unknown config key '{where}{key}'")
        if isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = _merge(out[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def build_config(overrides: dict = None, profile: str = None) -> PipelineConfig:
    """Defaults, then the profile preset, then ``overrides`` (nested dict)."""
    overrides = copy.deepcopy(overrides or {})
    profile = profile or overrides.pop("profile", None) or "desk"
    overrides.pop("profile", None)
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile '{profile}'; choose from {sorted(PROFILES)}")
    base = PipelineConfig(profile=profile).to_dict()
    merged = _merge(base, PROFILES[profile], "")
    merged = _merge(merged, overrides, "")
    cfg = PipelineConfig(profile=profile,
                         **{name: cls(**merged[name]) for name, cls in SECTIONS.items()})
    cfg.validate()
    return cfg


def load_config(path=None, profile: str = None, overrides: dict = None) -> PipelineConfig:
    data = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
    if overrides:
        data = _deep_update(data, overrides)
    return build_config(data, profile)


def _deep_update(base: dict, upd: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in upd.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_update(out[k], v)
        else:
            out[k] = v
    return out
