"""Three-layer many-to-one LSTM classifier with hand-derived BPTT.

Shapes follow the batch-major convention ``X[n, t, d]``. Gate order inside
every 4H block is (input, forget, cell, output). Everything is float64.
"""

from __future__ import annotations

import io
import json
import logging
import zipfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ModelFormatError, NumericalError, StaleCacheError
from .numerics import BCE_EPS, RngStream, bce_loss, sigmoid

log = logging.getLogger(__name__)

MODEL_FORMAT = "moldxai-lstm"
MODEL_FORMAT_VERSION = 1


@dataclass
class LstmLayerParams:
    W: np.ndarray  # (4H, D)
    U: np.ndarray  # (4H, H)
    b: np.ndarray  # (4H,)

    def __post_init__(self):
        self.W = np.ascontiguousarray(self.W, dtype=np.float64)
        self.U = np.ascontiguousarray(self.U, dtype=np.float64)
        self.b = np.ascontiguousarray(self.b, dtype=np.float64)
        h4, d = self.W.shape
        if h4 % 4:
            raise ConfigError(f"W rows must be a multiple of 4, got {h4}")
        h = h4 // 4
        if self.U.shape != (h4, h) or self.b.shape != (h4,):
            raise ConfigError(
                f"inconsistent layer shapes W{self.W.shape} U{self.U.shape} b{self.b.shape}"
            )

    @property
    def input_size(self) -> int:
        return self.W.shape[1]

    @property
    def hidden_size(self) -> int:
        return self.U.shape[1]

    @classmethod
    def zeros(cls, input_size: int, hidden_size: int) -> "LstmLayerParams":
        h4 = 4 * hidden_size
        return cls(np.zeros((h4, input_size)), np.zeros((h4, hidden_size)), np.zeros(h4))


@dataclass
class ModelParams:
    layers: list
    w_out: np.ndarray
    b_out: float
    feature_subset: list
    seed: int = 0
    feature_names: list = None
    norm_mean: np.ndarray = None  # per consumed feature, optional
    norm_std: np.ndarray = None
    version: int = field(default=0, compare=False)

    def __post_init__(self):
        self.w_out = np.ascontiguousarray(self.w_out, dtype=np.float64)
        self.b_out = float(self.b_out)
        self.feature_subset = [int(i) for i in self.feature_subset]
        if len(set(self.feature_subset)) != len(self.feature_subset):
            raise ConfigError(f"feature_subset has duplicates: {self.feature_subset}")
        if any(i < 0 for i in self.feature_subset):
            raise ConfigError("feature_subset indices must be non-negative")
        if len(self.layers) != 3:
            raise ConfigError(f"expected 3 LSTM layers, got {len(self.layers)}")
        d = len(self.feature_subset)
        for k, layer in enumerate(self.layers):
            if layer.input_size != d:
                raise ConfigError(
                    f"layer {k + 1} input size {layer.input_size} does not match expected {d}"
                )
            d = layer.hidden_size
        if self.w_out.shape != (d,):
            raise ConfigError(f"head weight shape {self.w_out.shape} does not match hidden size {d}")

    @property
    def hidden_sizes(self) -> tuple:
        return tuple(layer.hidden_size for layer in self.layers)

    @property
    def n_features(self) -> int:
        return len(self.feature_subset)

    def tensors(self) -> list:
        """Flat list of parameter arrays in a fixed order (shared with Gradients)."""
        out = []
        for layer in self.layers:
            out += [layer.W, layer.U, layer.b]
        out.append(self.w_out)
        return out

    def checksum(self) -> int:
        crc = zlib.crc32(np.float64(self.b_out).tobytes())
        for t in self.tensors():
            crc = zlib.crc32(t.tobytes(), crc)
        return crc

    def copy(self) -> "ModelParams":
        return ModelParams(
            layers=[LstmLayerParams(l.W.copy(), l.U.copy(), l.b.copy()) for l in self.layers],
            w_out=self.w_out.copy(),
            b_out=self.b_out,
            feature_subset=list(self.feature_subset),
            seed=self.seed,
            feature_names=None if self.feature_names is None else list(self.feature_names),
            norm_mean=None if self.norm_mean is None else self.norm_mean.copy(),
            norm_std=None if self.norm_std is None else self.norm_std.copy(),
        )

    # -- convenience interface used by the attribution methods --------------
    def logits(self, X, batch_size: int = 512) -> np.ndarray:
        X = _as_batch(X)
        return np.concatenate(
            [infer_logits(X[i:i + batch_size], self) for i in range(0, len(X), batch_size)]
        )

    def logit_input_grads(self, X, batch_size: int = 512):
        """Logits and d(logit)/d(input) for every sequence in ``X``."""
        X = _as_batch(X)
        s_all, dx_all = [], []
        for i in range(0, len(X), batch_size):
            _, cache = forward(X[i:i + batch_size], self)
            grads = backward(cache, self, target="logit")
            s_all.append(cache.s)
            dx_all.append(grads.dx)
        return np.concatenate(s_all), np.concatenate(dx_all)

    def predict_proba(self, X, batch_size: int = 512) -> np.ndarray:
        return sigmoid(self.logits(X, batch_size))


def _as_batch(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ConfigError(f"expected (N, T, D) or (T, D) input, got shape {X.shape}")
    return X


@dataclass
class TrainConfig:
    hidden_sizes: tuple = (300, 100, 100)
    learning_rate: float = 0.001325
    batch_size: int = 64
    epochs: int = 350
    dropout_hidden: float = 0.20181  # after layers 1 and 2
    dropout_last: float = 0.17249  # after layer 3
    seed: int = 0
    metrics_every: int = 1
    positive_label: int = 1

    def __post_init__(self):
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)
        if len(self.hidden_sizes) != 3 or min(self.hidden_sizes) < 1:
            raise ConfigError(f"hidden_sizes must be three positive ints, got {self.hidden_sizes}")
        for name in ("dropout_hidden", "dropout_last"):
            rate = getattr(self, name)
            if not 0.0 <= rate < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1), got {rate}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.metrics_every < 1:
            raise ConfigError("metrics_every must be >= 1")

    @property
    def dropout_rates(self) -> tuple:
        return (self.dropout_hidden, self.dropout_hidden, self.dropout_last)


# ---------------------------------------------------------------------------
# initialisation


def _glorot(rng: RngStream, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def _orthogonal(rng: RngStream, rows: int, cols: int) -> np.ndarray:
    a = rng.normal(size=(rows, cols))
    q, r = np.linalg.qr(a)
    return q * np.sign(np.diag(r))


def init_params(feature_subset, hidden_sizes, seed: int, feature_names=None) -> ModelParams:
    """Glorot-uniform W and head, orthogonal U, zero biases with forget bias 1."""
    rng = RngStream(seed).derive("init")
    layers = []
    d = len(feature_subset)
    for h in hidden_sizes:
        W = _glorot(rng, 4 * h, d)
        U = _orthogonal(rng, 4 * h, h)
        b = np.zeros(4 * h)
        b[h:2 * h] = 1.0
        layers.append(LstmLayerParams(W, U, b))
        d = h
    w_out = _glorot(rng, 1, d)[0]
    return ModelParams(layers, w_out, 0.0, list(feature_subset), seed, feature_names)


# ---------------------------------------------------------------------------
# forward / backward


def lstm_cell_forward(x_t, h_prev, c_prev, params: LstmLayerParams):
    """One LSTM step. Works for a single vector or a batch of row vectors.

    Returns (h_t, c_t, gates) where gates holds i, f, g, o and tanh(c_t).
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    c_prev = np.asarray(c_prev, dtype=np.float64)
    H = params.hidden_size
    if x_t.shape[-1] != params.input_size or h_prev.shape[-1] != H or c_prev.shape[-1] != H:
        raise ConfigError(
            f"cell shape mismatch: x {x_t.shape}, h {h_prev.shape}, c {c_prev.shape} "
            f"for layer (D={params.input_size}, H={H})"
        )
    z = x_t @ params.W.T + h_prev @ params.U.T + params.b
    i = sigmoid(z[..., :H])
    f = sigmoid(z[..., H:2 * H])
    g = np.tanh(z[..., 2 * H:3 * H])
    o = sigmoid(z[..., 3 * H:])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    return h, c, {"z": z, "i": i, "f": f, "g": g, "o": o, "tanh_c": tc}


@dataclass
class LayerCache:
    x: np.ndarray  # (N, T, D) layer input
    z: np.ndarray  # (N, T, 4H) gate pre-activations
    gates: np.ndarray  # (N, T, 4H) activated i, f, g, o
    c: np.ndarray  # (N, T, H)
    tanh_c: np.ndarray  # (N, T, H)
    h: np.ndarray  # (N, T, H) hidden states before dropout
    mask: np.ndarray  # (N, T, H) inverted-dropout mask, None in infer mode


@dataclass
class ForwardCache:
    layers: list
    s: np.ndarray  # (N,) logits
    p: np.ndarray  # (N,) probabilities
    checksum: int
    params_id: int

    @property
    def hidden_states(self) -> list:
        return [lc.h for lc in self.layers]


@dataclass
class Gradients:
    layers: list  # list of LstmLayerParams-shaped gradient holders
    w_out: np.ndarray
    b_out: float
    dx: np.ndarray  # (N, T, D) gradient w.r.t. the model input
    dh: list  # per layer (N, T, H): total derivative w.r.t. hidden state h_t

    def tensors(self) -> list:
        out = []
        for layer in self.layers:
            out += [layer.W, layer.U, layer.b]
        out.append(self.w_out)
        return out


def dropout_mask(rng: RngStream, shape, rate: float) -> np.ndarray:
    """Inverted-dropout mask: kept units are scaled by 1/(1-rate)."""
    if rate == 0.0:
        return np.ones(shape)
    return (rng.random(shape) >= rate) / (1.0 - rate)


def _gate_affine(H):
    # sigmoid(x) = 0.5 + 0.5 * tanh(x / 2): one tanh over all four gates
    scale = np.full(4 * H, 0.5)
    scale[2 * H:3 * H] = 1.0
    shift = np.full(4 * H, 0.5)
    shift[2 * H:3 * H] = 0.0
    return scale, shift


def _layer_forward(X, layer: LstmLayerParams, h_offset=None):
    N, T, _ = X.shape
    H = layer.hidden_size
    scale, shift = _gate_affine(H)
    z = X @ layer.W.T + layer.b  # input projection for all steps at once
    zs = z * scale
    US = (layer.U * scale[:, None]).T
    gates = np.empty_like(z)
    c = np.empty((N, T, H))
    h = np.empty((N, T, H))
    h_prev = np.zeros((N, H))
    c_prev = np.zeros((N, H))
    for t in range(T):
        zst = zs[:, t]
        zst += h_prev @ US
        gt = gates[:, t]
        np.tanh(zst, out=gt)
        gt *= scale
        gt += shift
        c_prev = gt[:, H:2 * H] * c_prev
        c_prev += gt[:, :H] * gt[:, 2 * H:3 * H]
        c[:, t] = c_prev
        h_prev = gt[:, 3 * H:] * np.tanh(c_prev)
        if h_offset is not None:
            h_prev = h_prev + h_offset[:, t]
        h[:, t] = h_prev
    z = zs / scale
    tanh_c = np.tanh(c)
    return z, gates, c, tanh_c, h


def forward(X, params: ModelParams, mode: str = "infer", rng: RngStream = None,
            dropout_rates=(0.0, 0.0, 0.0), h_offsets=None):
    """Run the stacked LSTM and the logistic head.

    ``X`` must already be restricted to ``params.feature_subset``. In train
    mode ``rng`` drives the dropout masks. ``h_offsets`` (one optional array
    per layer) is added to each hidden state as it is produced; it exists so
    hidden-state gradients can be checked by finite differences.

    Returns (p, cache).
    """
    X = _as_batch(X)
    if X.shape[1] < 1:
        raise ConfigError("sequence length must be >= 1")
    if X.shape[2] != params.n_features:
        raise ConfigError(
            f"input has {X.shape[2]} features, model consumes {params.n_features}"
        )
    if mode not in ("train", "infer"):
        raise ConfigError(f"mode must be 'train' or 'infer', got {mode!r}")
    if mode == "train" and rng is None and any(dropout_rates):
        raise ConfigError("train mode with dropout needs an RngStream")
    caches = []
    inp = X
    for k, layer in enumerate(params.layers):
        off = None if h_offsets is None else h_offsets[k]
        z, gates, c, tanh_c, h = _layer_forward(inp, layer, off)
        if not np.isfinite(h).all():
            bad = np.argwhere(~np.isfinite(h))[0]
            raise NumericalError(f"non-finite activation in layer {k + 1} at time step {bad[1]}")
        mask = None
        out = h
        if mode == "train" and dropout_rates[k] > 0:
            mask = dropout_mask(rng, h.shape, dropout_rates[k])
            out = h * mask
        caches.append(LayerCache(inp, z, gates, c, tanh_c, h, mask))
        inp = out
    s = inp[:, -1] @ params.w_out + params.b_out
    if not np.isfinite(s).all():
        raise NumericalError("non-finite logit in classification head")
    p = sigmoid(s)
    cache = ForwardCache(caches, s, np.atleast_1d(p), params.checksum(), id(params))
    return cache.p, cache


def infer_logits(X, params: ModelParams) -> np.ndarray:
    """Inference-only logits: no caches, one fused [x_t, h_prev] matmul per step.

    Activations are kept time-major so each step reads one contiguous block.
    Agrees with ``forward(X, params)[1].s`` up to float rounding; used for
    prediction and latency measurement.
    """
    X = _as_batch(X)
    if X.shape[2] != params.n_features:
        raise ConfigError(f"input has {X.shape[2]} features, model consumes {params.n_features}")
    N, T, _ = X.shape
    inp = np.ascontiguousarray(X.transpose(1, 0, 2))  # (T, N, D)
    last = len(params.layers) - 1
    for k, layer in enumerate(params.layers):
        D, H = layer.input_size, layer.hidden_size
        scale, shift = _gate_affine(H)
        WU = np.concatenate([layer.W, layer.U], axis=1).T * scale  # (D+H, 4H)
        bs = layer.b * scale
        xh = np.zeros((N, D + H))
        c = np.zeros((N, H))
        g = np.empty((N, 4 * H))
        out = None if k == last else np.empty((T, N, H))
        for t in range(T):
            xh[:, :D] = inp[t]
            np.matmul(xh, WU, out=g)
            g += bs
            np.tanh(g, out=g)
            g *= scale
            g += shift
            c *= g[:, H:2 * H]
            c += g[:, :H] * g[:, 2 * H:3 * H]
            h = xh[:, D:]
            np.tanh(c, out=h)
            h *= g[:, 3 * H:]
            if out is not None:
                out[t] = h
        inp = out if out is not None else xh[:, D:]
    s = inp @ params.w_out + params.b_out
    if not np.isfinite(s).all():
        raise NumericalError("non-finite logit in classification head")
    return s


def _layer_backward(lc: LayerCache, layer: LstmLayerParams, dh_ext):
    """BPTT through one layer given dL/dh_t from above (pre-dropout)."""
    N, T, H = lc.h.shape
    G = lc.gates
    i, f, g, o = G[..., :H], G[..., H:2 * H], G[..., 2 * H:3 * H], G[..., 3 * H:]
    tc = lc.tanh_c
    c_prev = np.zeros_like(lc.c)
    c_prev[:, 1:] = lc.c[:, :-1]
    # time-independent local derivative factors, vectorised over the whole sequence
    dc_fac = np.empty((N, T, 3, H))
    dc_fac[:, :, 0] = g * i * (1.0 - i)
    dc_fac[:, :, 1] = c_prev * f * (1.0 - f)
    dc_fac[:, :, 2] = i * (1.0 - g * g)
    do_fac = tc * o * (1.0 - o)
    dh_to_dc = o * (1.0 - tc * tc)

    dz = np.empty((N, T, 4 * H))
    dz_c = dz[..., :3 * H].reshape(N, T, 3, H)
    dh_total = np.empty((N, T, H))
    dh_rec = np.zeros((N, H))
    dc = np.zeros((N, H))
    U = layer.U
    for t in range(T - 1, -1, -1):
        dh = dh_total[:, t]
        np.add(dh_ext[:, t], dh_rec, out=dh)
        dc *= f[:, t + 1] if t + 1 < T else 0.0
        dc += dh * dh_to_dc[:, t]
        np.multiply(dc[:, None, :], dc_fac[:, t], out=dz_c[:, t])
        np.multiply(dh, do_fac[:, t], out=dz[:, t, 3 * H:])
        dh_rec = dz[:, t] @ U
    h_prev = np.zeros_like(lc.h)
    h_prev[:, 1:] = lc.h[:, :-1]
    D = lc.x.shape[2]
    dz2 = dz.reshape(N * T, 4 * H)
    dW = dz2.T @ lc.x.reshape(N * T, D)
    dU = dz2.T @ h_prev.reshape(N * T, H)
    db = dz2.sum(axis=0)
    dx = dz @ layer.W
    return LstmLayerParams(dW, dU, db), dx, dh_total


def backward(cache: ForwardCache, params: ModelParams, target="loss", y=None) -> Gradients:
    """Exact gradients for the batch in ``cache``.

    ``target='loss'`` differentiates the mean clamped BCE against labels
    ``y``; ``target='logit'`` differentiates the sum of logits (per-sample
    logit gradients, since samples are independent).
    """
    if cache.params_id != id(params) or cache.checksum != params.checksum():
        raise StaleCacheError("parameters changed since the forward pass; rerun forward()")
    N = cache.s.shape[0]
    if target == "loss":
        if y is None:
            raise ConfigError("target='loss' needs labels y")
        y = np.asarray(y, dtype=np.float64).reshape(N)
        p = cache.p
        inside = (p > BCE_EPS) & (p < 1.0 - BCE_EPS)
        ds = np.where(inside, p - y, 0.0) / N
    elif target == "logit":
        ds = np.ones(N)
    else:
        raise ConfigError(f"unknown backward target {target!r}")

    top = cache.layers[-1]
    last_out = top.h[:, -1] if top.mask is None else top.h[:, -1] * top.mask[:, -1]
    dw_out = ds @ last_out
    db_out = float(ds.sum())

    d_out = np.zeros_like(top.h)
    d_out[:, -1] = ds[:, None] * params.w_out[None, :]
    layer_grads = [None] * 3
    dh_all = [None] * 3
    for k in range(2, -1, -1):
        lc = cache.layers[k]
        dh_ext = d_out if lc.mask is None else d_out * lc.mask
        layer_grads[k], d_out, dh_all[k] = _layer_backward(lc, params.layers[k], dh_ext)
    return Gradients(layer_grads, dw_out, db_out, d_out, dh_all)


def forward_flops(params: ModelParams, T: int) -> int:
    """Multiply-adds of one inference forward pass over T steps (matmuls only)."""
    total = 0
    for layer in params.layers:
        h4 = 4 * layer.hidden_size
        total += T * h4 * (layer.input_size + layer.hidden_size)
    return total + params.w_out.size


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    m_b: float = 0.0
    v_b: float = 0.0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        return cls([np.zeros_like(a) for a in params.tensors()],
                   [np.zeros_like(a) for a in params.tensors()])


def adam_update(theta, grad, m, v, lr, t, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam on one array; returns (theta, m, v) (new arrays)."""
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    return theta - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


def adam_step(params: ModelParams, grads: Gradients, state: AdamState, lr: float,
              beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """In-place Adam update of every parameter tensor, including the head bias."""
    state.t += 1
    t = state.t
    for idx, (theta, g) in enumerate(zip(params.tensors(), grads.tensors())):
        new, state.m[idx], state.v[idx] = adam_update(theta, g, state.m[idx], state.v[idx],
                                                      lr, t, beta1, beta2, eps)
        theta[...] = new
    b, state.m_b, state.v_b = adam_update(params.b_out, grads.b_out, state.m_b, state.v_b,
                                          lr, t, beta1, beta2, eps)
    params.b_out = float(b)
    params.version += 1


# ---------------------------------------------------------------------------
# training and evaluation


@dataclass
class Metrics:
    accuracy: float
    f1: float
    tp: int
    fp: int
    fn: int
    tn: int

    def as_dict(self) -> dict:
        return {"accuracy": self.accuracy, "f1": self.f1, "tp": self.tp,
                "fp": self.fp, "fn": self.fn, "tn": self.tn}


def confusion_metrics(y_true, y_pred, positive_label: int = 1) -> Metrics:
    """Accuracy and F1 = 2TP/(2TP+FP+FN) for ``positive_label``."""
    y_true = np.asarray(y_true).astype(int)
    y_pred = np.asarray(y_pred).astype(int)
    if y_true.size == 0:
        raise ConfigError("cannot compute metrics on an empty set")
    pos_t = y_true == positive_label
    pos_p = y_pred == positive_label
    tp = int(np.sum(pos_t & pos_p))
    fp = int(np.sum(~pos_t & pos_p))
    fn = int(np.sum(pos_t & ~pos_p))
    tn = int(np.sum(~pos_t & ~pos_p))
    acc = (tp + tn) / y_true.size
    denom = 2 * tp + fp + fn
    f1 = 2 * tp / denom if denom else 0.0
    return Metrics(acc, f1, tp, fp, fn, tn)


def evaluate(params: ModelParams, X, y, positive_label: int = 1, threshold: float = 0.5) -> Metrics:
    """Metrics at threshold 0.5 (p >= threshold predicts label 1)."""
    p = params.predict_proba(X)
    return confusion_metrics(y, (p >= threshold).astype(int), positive_label)


def train(X_train, y_train, X_val, y_val, config: TrainConfig, feature_subset=None,
          feature_names=None, ids=None):
    """Mini-batch Adam on mean BCE.

    ``X_*`` are already restricted to ``feature_subset`` (defaults to all
    columns). Training rows are put into canonical order (by ``ids`` when
    given) before the seeded per-epoch shuffle, so the result does not
    depend on the order the caller supplied them in.

    Returns (params, history) with one history entry per evaluated epoch.
    """
    X_train = _as_batch(X_train)
    X_val = _as_batch(X_val)
    y_train = np.asarray(y_train, dtype=np.float64)
    y_val = np.asarray(y_val)
    if len(X_train) == 0 or len(X_val) == 0:
        raise ConfigError("training and validation sets must be nonempty")
    if X_train.shape[2] != X_val.shape[2]:
        raise ConfigError("train and validation feature counts differ")
    if feature_subset is None:
        feature_subset = list(range(X_train.shape[2]))
    if ids is not None:
        order = np.array(sorted(range(len(ids)), key=lambda i: ids[i]))
        X_train, y_train = X_train[order], y_train[order]

    params = init_params(feature_subset, config.hidden_sizes, config.seed, feature_names)
    if X_train.shape[2] != params.n_features:
        raise ConfigError("input width does not match feature_subset")
    history = []
    if config.epochs == 0:
        return params, history

    root = RngStream(config.seed)
    shuffle_rng = root.derive("shuffle")
    drop_rng = root.derive("dropout")
    state = AdamState.zeros_like(params)
    n = len(X_train)
    for epoch in range(1, config.epochs + 1):
        perm = shuffle_rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            p, cache = forward(X_train[idx], params, "train", drop_rng, config.dropout_rates)
            batch_loss = float(np.mean(bce_loss(p, y_train[idx])))
            if not np.isfinite(batch_loss):
                raise NumericalError(f"training diverged: non-finite loss at epoch {epoch}")
            total += batch_loss * len(idx)
            grads = backward(cache, params, "loss", y_train[idx])
            adam_step(params, grads, state, config.learning_rate)
        if epoch % config.metrics_every == 0 or epoch == config.epochs:
            m = evaluate(params, X_val, y_val, config.positive_label)
            history.append({"epoch": epoch, "loss": total / n,
                            "val_accuracy": m.accuracy, "val_f1": m.f1})
            log.debug("epoch %d loss %.4f val_acc %.4f", epoch, total / n, m.accuracy)
    return params, history


# ---------------------------------------------------------------------------
# serialisation
#
# Layout: a zip archive holding ``header.json`` and one ``.npy`` member per
# tensor (row-major float64, little endian). header.json records the format
# name/version, hidden sizes, feature_subset, feature names, seed, b_out (as
# a float.hex string so it round-trips exactly) and the tensor member list.


def _tensor_names(n_layers=3):
    names = []
    for k in range(n_layers):
        names += [f"layer{k + 1}.W", f"layer{k + 1}.U", f"layer{k + 1}.b"]
    return names + ["head.w"]


def _member(name: str) -> zipfile.ZipInfo:
    # fixed timestamp so identical models give identical bytes
    return zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))


def save_model(params: ModelParams, path) -> Path:
    path = Path(path)
    names = _tensor_names()
    header = {
        "format": MODEL_FORMAT,
        "version": MODEL_FORMAT_VERSION,
        "hidden_sizes": list(params.hidden_sizes),
        "feature_subset": params.feature_subset,
        "feature_names": params.feature_names,
        "seed": int(params.seed),
        "b_out": float(params.b_out).hex(),
        "tensors": names,
        "has_norm": params.norm_mean is not None,
    }
    arrays = dict(zip(names, params.tensors()))
    if params.norm_mean is not None:
        arrays["norm.mean"] = params.norm_mean
        arrays["norm.std"] = params.norm_std
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(_member("header.json"), json.dumps(header, indent=1))
        for name, arr in arrays.items():
            buf = io.BytesIO()
            np.save(buf, np.ascontiguousarray(arr, dtype="<f8"), allow_pickle=False)
            zf.writestr(_member(name + ".npy"), buf.getvalue())
    return path


def load_model(path) -> ModelParams:
    path = Path(path)
    if not path.is_file():
        raise ModelFormatError(f"missing model file {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            header = json.loads(zf.read("header.json"))
            if header.get("format") != MODEL_FORMAT:
                raise ModelFormatError(f"{path}: not a {MODEL_FORMAT} file")
            if header.get("version") != MODEL_FORMAT_VERSION:
                raise ModelFormatError(
                    f"{path}: unsupported model format version {header.get('version')}"
                )

            def arr(name):
                return np.load(io.BytesIO(zf.read(name + ".npy")), allow_pickle=False)

            t = [arr(n) for n in header["tensors"]]
            norm = (arr("norm.mean"), arr("norm.std")) if header.get("has_norm") else (None, None)
    except ModelFormatError:
        raise
    except (zipfile.BadZipFile, KeyError, ValueError, EOFError, OSError) as exc:
        raise ModelFormatError(f"{path}: corrupt model file ({exc})") from exc
    layers = [LstmLayerParams(*t[3 * k:3 * k + 3]) for k in range(3)]
    try:
        return ModelParams(layers, t[9], float.fromhex(header["b_out"]), header["feature_subset"],
                           header["seed"], header.get("feature_names"), norm[0], norm[1])
    except ConfigError as exc:
        raise ModelFormatError(f"{path}: inconsistent model file ({exc})") from exc
