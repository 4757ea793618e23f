"""Synthetic injection-molding cycles, augmentation, splitting, scaling and IO.

Each synthetic channel is a baseline plus three phase templates over the
cycle: an injection ramp, a holding plateau and a cooling decay, on
disjoint time supports. Every cycle draws one latent amplitude ``a_c ~ N(0, 1)``
per channel, which scales that channel's whole profile by ``1 + kappa * a_c``.
Each channel also has a *reference* phase, the one its quality reading is
taken from in the documented label rule. Labels are a threshold rule on the latents of the causal
channels only, so every other channel is label-independent by construction.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from statistics import NormalDist

import numpy as np

from .errors import ConfigError, DataError
from .numerics import RngStream

DATASET_FORMAT = "moldxai-dataset"
DATASET_FORMAT_VERSION = 1
SAMPLING_MS = 10

# Names from the published ranking first; the rest are placeholders chosen
# to look like typical machine signals.
DEFAULT_CHANNELS = [
    ("Injection Pressure", "bar"),
    ("Actual Clamping Force", "kN"),
    ("Screw Position", "mm"),
    ("End of Ejection Position", "mm"),
    ("Screw Torque", "Nm"),
    ("Mold Position", "mm"),
    ("Screw Speed", "1/min"),
    ("Contact Force", "kN"),
    ("Screw Velocity", "mm/s"),
    ("Cavity Pressure", "bar"),
    ("Crosshead Position", "mm"),
    ("Holding Pressure", "bar"),
    ("Melt Temperature", "degC"),
    ("Mold Temperature", "degC"),
    ("Nozzle Temperature", "degC"),
    ("Barrel Temperature Zone 1", "degC"),
    ("Barrel Temperature Zone 2", "degC"),
    ("Ejector Force", "kN"),
    ("Hydraulic Oil Temperature", "degC"),
]
DEFAULT_CAUSAL = (0, 1, 2)

PHASES = ("injection", "holding", "cooling")
PHASE_BOUNDS = (0.15, 0.45)  # fractions of T where holding and cooling start
COOLING_TAU = 0.15  # decay constant as a fraction of T
COOLING_RESIDUAL = 0.3  # level the cooling decay settles to
KAPPA = 0.3
SCHEMA_SEED = 0x1CE


@dataclass
class Cycle:
    values: np.ndarray  # (T, F)
    label: int
    id: str
    source: str = None
    fold: str = None  # "train", "val" or None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.source is None:
            self.source = self.id

    @property
    def T(self) -> int:
        return self.values.shape[0]


@dataclass
class DatasetSchema:
    channel_names: list
    units: list
    causal: list = field(default_factory=list)
    label_rule: dict = None
    sampling_ms: int = SAMPLING_MS

    @property
    def n_channels(self) -> int:
        return len(self.channel_names)

    def to_dict(self) -> dict:
        return {"channel_names": list(self.channel_names), "units": list(self.units),
                "causal": [int(c) for c in self.causal], "label_rule": self.label_rule,
                "sampling_ms": self.sampling_ms}

    @classmethod
    def from_dict(cls, d) -> "DatasetSchema":
        return cls(d["channel_names"], d["units"], d.get("causal", []), d.get("label_rule"),
                   d.get("sampling_ms", SAMPLING_MS))


@dataclass
class Dataset:
    cycles: list
    schema: DatasetSchema

    def __len__(self):
        return len(self.cycles)

    @property
    def X(self) -> np.ndarray:
        lengths = {c.T for c in self.cycles}
        if len(lengths) > 1:
            raise DataError(f"cycles have different lengths {sorted(lengths)}; cannot stack")
        return np.stack([c.values for c in self.cycles])

    @property
    def y(self) -> np.ndarray:
        return np.array([c.label for c in self.cycles], dtype=int)

    @property
    def ids(self) -> list:
        return [c.id for c in self.cycles]

    def subset(self, fold: str) -> "Dataset":
        return Dataset([c for c in self.cycles if c.fold == fold], self.schema)


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, X):
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.std

    def invert(self, Z):
        return np.asarray(Z, dtype=np.float64) * self.std + self.mean

    def select(self, subset) -> "NormStats":
        subset = list(subset)
        return NormStats(self.mean[subset], self.std[subset])


# ---------------------------------------------------------------------------
# generation


def _channel_constants(F: int, causal) -> dict:
    """Fixed per-channel shape constants; independent of the sampling seed."""
    rng = RngStream(SCHEMA_SEED).derive(F)
    base = rng.uniform(-2.0, 2.0, F)
    weights = rng.uniform(0.6, 1.5, (F, 3)) * np.where(rng.random((F, 3)) < 0.2, -1.0, 1.0)
    reference = np.arange(F) % 3
    for j, c in enumerate(causal):
        reference[c] = j % 3
        weights[c, j % 3] = abs(weights[c, j % 3])
    return {"base": base, "weights": weights, "reference": reference}


def phase_templates(T: int) -> np.ndarray:
    """(3, T) injection ramp, holding plateau and cooling decay on disjoint supports."""
    t = np.arange(T, dtype=np.float64)
    t1 = max(1, int(round(PHASE_BOUNDS[0] * T)))
    t2 = max(t1 + 1, int(round(PHASE_BOUNDS[1] * T)))
    tpl = np.zeros((3, T))
    tpl[0, :t1] = (t[:t1] + 1) / t1
    tpl[1, t1:t2] = 1.0
    tpl[2, t2:] = COOLING_RESIDUAL + (1.0 - COOLING_RESIDUAL) * np.exp(-(t[t2:] - t2) / (COOLING_TAU * T))
    return tpl


def render_cycle(latents, constants: dict, T: int, noise: float = 0.0, rng: RngStream = None):
    """Sensor matrix (T, F) for one cycle's latent amplitudes."""
    latents = np.asarray(latents, dtype=np.float64)
    F = latents.size
    tpl = phase_templates(T)
    amp = constants["weights"] * (1.0 + KAPPA * latents)[:, None]
    values = constants["base"][None, :] + tpl.T @ amp.T
    if noise > 0:
        values = values + noise * rng.normal(size=values.shape)
    return values


def recover_latents(values, rule: dict) -> np.ndarray:
    """Latents of the causal channels read back from a noise-free cycle.

    Independent of the generator's code path: it inverts the documented
    template formula at the peak of each causal channel's reference phase.
    """
    values = np.asarray(values)
    T = values.shape[0]
    tpl = phase_templates(T)
    out = []
    for c, ph, w, b in zip(rule["channels"], rule["phases"], rule["weights"], rule["base"]):
        k = PHASES.index(ph)
        t_star = int(np.argmax(tpl[k]))
        ratio = (values[t_star, c] - b) / (w * tpl[k, t_star])
        out.append((ratio - 1.0) / rule["kappa"])
    return np.array(out)


def apply_label_rule(causal_latents, rule: dict) -> int:
    return int(float(np.sum(causal_latents)) > rule["threshold"])


def generate_cycles(n: int, T: int, F: int = 19, causal=DEFAULT_CAUSAL, noise: float = 0.05,
                    balance: float = 0.5, seed: int = 0, margin: float = 0.3,
                    channel_names=None, return_latents: bool = False):
    """Synthetic labelled cycles.

    Label rule: ``sum(a_c for causal c) > threshold`` where the threshold is
    the ``1 - balance`` quantile of that sum, so ``balance`` is the expected
    share of good parts. Latents closer than ``margin`` to the threshold are
    redrawn (cleanly separable quality classes). Returns a Dataset, plus the
    (n, F) latent matrix when ``return_latents``.
    """
    causal = [int(c) for c in causal]
    if n < 2:
        raise ConfigError("n must be >= 2")
    if T < 4:
        raise ConfigError("T must be >= 4")
    if not causal or len(causal) > 3:
        raise ConfigError("causal must name 1 to 3 channels")
    if len(set(causal)) != len(causal) or any(c < 0 or c >= F for c in causal):
        raise ConfigError(f"invalid causal channel indices {causal} for F={F}")
    if not 0.0 < balance < 1.0:
        raise ConfigError("balance must lie in (0, 1)")
    n_pos = math.floor(n * balance + 0.5)
    if n_pos == 0 or n_pos == n:
        raise ConfigError(f"balance {balance} is unachievable with n={n}")
    if noise < 0 or margin < 0:
        raise ConfigError("noise and margin must be >= 0")

    if channel_names is None:
        if F <= len(DEFAULT_CHANNELS):
            names = [nm for nm, _ in DEFAULT_CHANNELS[:F]]
            units = [u for _, u in DEFAULT_CHANNELS[:F]]
        else:
            names = [nm for nm, _ in DEFAULT_CHANNELS] + [f"Channel {i}" for i in range(len(DEFAULT_CHANNELS), F)]
            units = [u for _, u in DEFAULT_CHANNELS] + ["-"] * (F - len(DEFAULT_CHANNELS))
    else:
        names = list(channel_names)
        units = ["-"] * F
        if len(names) != F:
            raise ConfigError("channel_names length must equal F")

    const = _channel_constants(F, causal)
    threshold = math.sqrt(len(causal)) * NormalDist().inv_cdf(1.0 - balance)
    rule = {
        "description": "label = 1 (good part) iff the summed latent amplitudes of the causal "
                       "channels exceed threshold; a channel's latent a scales its profile by "
                       "(1 + kappa * a) and is read off at the peak of its reference phase",
        "channels": causal,
        "phases": [PHASES[const["reference"][c]] for c in causal],
        "weights": [float(const["weights"][c, const["reference"][c]]) for c in causal],
        "base": [float(const["base"][c]) for c in causal],
        "kappa": KAPPA,
        "threshold": threshold,
        "margin": margin,
    }
    schema = DatasetSchema(names, units, causal, rule)

    root = RngStream(seed)
    lat_rng = root.derive("latent")
    noise_rng = root.derive("noise")
    latents = lat_rng.normal(size=(n, F))
    for i in range(n):
        while abs(latents[i, causal].sum() - threshold) < margin:
            latents[i, causal] = lat_rng.normal(size=len(causal))
    cycles = []
    width = max(4, len(str(n - 1)))
    for i in range(n):
        values = render_cycle(latents[i], const, T, noise, noise_rng)
        cid = f"c{i:0{width}d}"
        cycles.append(Cycle(values, apply_label_rule(latents[i, causal], rule), cid))
    ds = Dataset(cycles, schema)
    return (ds, latents) if return_latents else ds


# ---------------------------------------------------------------------------
# augmentation, split, scaling


def augment_subsample(cycle: Cycle, n_phases: int = 4) -> list:
    """Split a cycle into ``n_phases`` stride-subsampled cycles.

    Phase p keeps time indices p, p+4, p+8, ...; for T not divisible by 4
    the leading phases get the extra sample (ceil/floor lengths).
    """
    if cycle.T < n_phases:
        raise ConfigError(f"cycle {cycle.id} has T={cycle.T} < {n_phases}")
    return [Cycle(cycle.values[p::n_phases].copy(), cycle.label, f"{cycle.id}_p{p}",
                  source=cycle.source, fold=cycle.fold)
            for p in range(n_phases)]


def augment_dataset(ds: Dataset, n_phases: int = 4) -> Dataset:
    out = []
    for c in ds.cycles:
        out.extend(augment_subsample(c, n_phases))
    return Dataset(out, ds.schema)


def split_counts(n: int, ratio: float) -> tuple:
    """(n_train, n_val) with n_val rounded half-up."""
    n_val = math.floor(n * ratio + 0.5)
    return n - n_val, n_val


def split(ds: Dataset, val_ratio: float = 0.33, seed: int = 0, group_by_source: bool = False):
    """Seeded random train/validation split; sets ``fold`` on copies of the cycles.

    With ``group_by_source`` all phase variants of one source cycle land in
    the same fold and the validation count is rounded on sources instead.
    """
    if not 0.0 < val_ratio < 1.0:
        raise ConfigError("val_ratio must lie in (0, 1)")
    n = len(ds)
    if n < 2:
        raise ConfigError("need at least 2 cycles to split")
    rng = RngStream(seed).derive("split")
    if group_by_source:
        sources = sorted({c.source for c in ds.cycles})
        _, n_val = split_counts(len(sources), val_ratio)
        perm = rng.permutation(len(sources))
        val_src = {sources[i] for i in perm[:n_val]}
        is_val = [c.source in val_src for c in ds.cycles]
    else:
        _, n_val = split_counts(n, val_ratio)
        perm = rng.permutation(n)
        val_idx = set(perm[:n_val].tolist())
        is_val = [i in val_idx for i in range(n)]
    train, val = [], []
    for c, v in zip(ds.cycles, is_val):
        copy = Cycle(c.values, c.label, c.id, c.source, "val" if v else "train")
        (val if v else train).append(copy)
    return Dataset(train, ds.schema), Dataset(val, ds.schema)


def compute_norm_stats(X) -> NormStats:
    """Per-channel mean/std over every (cycle, time step); constant channels get std 1."""
    X = np.asarray(X, dtype=np.float64)
    flat = X.reshape(-1, X.shape[-1])
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    std = np.where(std > 1e-12 * np.maximum(1.0, np.abs(mean)), std, 1.0)
    return NormStats(mean, std)


def normalize(train: Dataset, val: Dataset):
    """Z-score both splits with statistics from ``train`` only."""
    if len(train) == 0:
        raise ConfigError("training split is empty")
    stats = compute_norm_stats(np.concatenate([c.values for c in train.cycles]))

    def scaled(ds):
        return Dataset([Cycle(stats.apply(c.values), c.label, c.id, c.source, c.fold)
                        for c in ds.cycles], ds.schema)

    return scaled(train), scaled(val), stats


def channel_means(X) -> np.ndarray:
    """Time-averaged channel values, (N, F)."""
    return np.asarray(X).mean(axis=-2)


# ---------------------------------------------------------------------------
# IO
#
# Directory layout: manifest.json + one CSV per cycle (header = channel
# names, rows = time steps, '%.17g' decimals, UTF-8).


def save_dataset(ds: Dataset, directory, extra: dict = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    header = ",".join(ds.schema.channel_names)
    entries = []
    for c in ds.cycles:
        fname = f"{c.id}.csv"
        np.savetxt(directory / fname, c.values, delimiter=",", header=header, comments="",
                   fmt="%.17g", encoding="utf-8")
        entries.append({"file": fname, "id": c.id, "label": int(c.label),
                        "source": c.source, "fold": c.fold})
    manifest = {"format": DATASET_FORMAT, "version": DATASET_FORMAT_VERSION,
                **ds.schema.to_dict(), "cycles": entries}
    if extra:
        manifest.update(extra)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    return directory


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.is_file():
        raise DataError(f"missing dataset manifest {path}")
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc
    if manifest.get("format") != DATASET_FORMAT:
        raise DataError(f"{path}: not a {DATASET_FORMAT} manifest")
    if manifest.get("version") != DATASET_FORMAT_VERSION:
        raise DataError(f"{path}: unsupported dataset version {manifest.get('version')}")
    return manifest


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    manifest = read_manifest(directory)
    schema = DatasetSchema.from_dict(manifest)
    F = schema.n_channels
    cycles = []
    for entry in manifest["cycles"]:
        path = directory / entry["file"]
        if not path.is_file():
            raise DataError(f"missing cycle file {path}")
        with open(path, encoding="utf-8") as fh:
            names = fh.readline().rstrip("\r\n").split(",")
            if len(names) != F:
                raise DataError(f"{path}: {len(names)} columns, manifest declares {F}")
            if names != list(schema.channel_names):
                raise DataError(f"{path}: header does not match manifest channel names")
            try:
                values = np.loadtxt(fh, delimiter=",", ndmin=2, dtype=np.float64)
            except ValueError as exc:
                raise DataError(f"{path}: unreadable values ({exc})") from exc
        if values.shape[1] != F:
            raise DataError(f"{path}: {values.shape[1]} columns, manifest declares {F}")
        if not np.isfinite(values).all():
            raise DataError(f"{path}: contains NaN or infinite values")
        cycles.append(Cycle(values, int(entry["label"]), entry["id"], entry.get("source"),
                            entry.get("fold")))
    return Dataset(cycles, schema)
