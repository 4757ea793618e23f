"""Seeded random streams, stable scalar functions and a finite-difference oracle."""

from __future__ import annotations

import zlib
from typing import Callable

import numpy as np

from .errors import NumericalError

BCE_EPS = 1e-7


def _stream_key(stream) -> int:
    if isinstance(stream, (int, np.integer)):
        return int(stream) & 0xFFFFFFFFFFFFFFFF
    return zlib.crc32(str(stream).encode("utf-8"))


class RngStream:
    """PCG64 generator keyed by a 64-bit seed and a path of stream ids.

    Streams derived with different ids are statistically independent and
    never share state; the same (seed, path) always yields the same draws.
    """

    def __init__(self, seed: int, path: tuple = ()):
        if int(seed) < 0 or int(seed) >= 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self.path = tuple(path)
        entropy = [self.seed & 0xFFFFFFFF, self.seed >> 32]
        seq = np.random.SeedSequence(entropy, spawn_key=tuple(_stream_key(p) for p in self.path))
        self.gen = np.random.Generator(np.random.PCG64(seq))

    def derive(self, stream) -> "RngStream":
        """Child stream for ``stream`` (int or string id)."""
        return RngStream(self.seed, self.path + (stream,))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, path={self.path!r})"

    # thin pass-throughs, so callers do not reach into .gen everywhere
    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def random(self, size=None):
        return self.gen.random(size)


def sigmoid(x):
    """Logistic function without overflow for large |x|."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    if out.ndim == 0:
        return float(out)
    return out


def bce_loss(p, y, eps: float = BCE_EPS):
    """Binary cross-entropy with the probability clamped to [eps, 1-eps]."""
    p = np.clip(np.asarray(p, dtype=np.float64), eps, 1.0 - eps)
    y = np.asarray(y, dtype=np.float64)
    loss = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    if loss.ndim == 0:
        return float(loss)
    return loss


def finite_difference_gradient(f: Callable[[np.ndarray], float], x, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    Raises NumericalError if any evaluation of ``f`` is non-finite.
    """
    x = np.array(x, dtype=np.float64)
    scalar_input = x.ndim == 0
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(flat.reshape(x.shape)))
        flat[i] = orig - eps
        fm = float(f(flat.reshape(x.shape)))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"finite-difference oracle failed: non-finite f at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * eps)
    if scalar_input:
        return grad[0]
    return grad.reshape(x.shape)


def max_relative_error(a, b, floor: float = 1e-8) -> float:
    """max |a-b| / max(|a|, |b|, floor), elementwise."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))
