"""Reproducible random streams.

Every draw is derived from the raw 64-bit output of Philox4x64-10 (numpy's
``Philox`` bit generator, keyed by ``(seed, stream)`` with a zero counter),
using fixed transforms rather than numpy's distribution methods, whose
algorithms are not pinned across releases:

* uniform in [0, 1):  ``(w >> 11) * 2**-53``
* standard normal:    Box-Muller on two uniforms ``u1, u2`` (one normal per
  pair): ``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)``
* integer in [lo, hi]: ``lo + floor(u * (hi - lo + 1))``
* Bernoulli(p):        ``u < p``

Draws are consumed in array order, so the same seed and the same sequence of
calls reproduce the same values on any platform.
"""
from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_TWO_POW_M53 = 2.0 ** -53


class Stream:
    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        self._bits = np.random.Philox(key=self.seed | (self.stream << 64))

    def raw(self, n: int) -> np.ndarray:
        return self._bits.random_raw(int(n)).astype(np.uint64, copy=False)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * _TWO_POW_M53
        return (low + (high - low) * u).reshape(shape)

    def normal(self, shape=(), loc: float = 0.0, scale: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        u = self.uniform((2, n))
        z = np.sqrt(-2.0 * np.log1p(-u[0])) * np.cos(2.0 * np.pi * u[1])
        return (loc + scale * z).reshape(shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Integers in the closed range [low, high]."""
        span = int(high) - int(low) + 1
        u = self.uniform(shape)
        return (int(low) + np.floor(u * span)).astype(np.int64)

    def bernoulli(self, p, shape=()) -> np.ndarray:
        return self.uniform(shape) < p

    def choice(self, weights) -> int:
        w = np.asarray(weights, dtype=np.float64)
        cdf = np.cumsum(w / w.sum())
        return int(min(np.searchsorted(cdf, self.uniform(), side="right"), len(w) - 1))

    def spawn(self, stream: int) -> "Stream":
        """An independent stream with the same seed and a different stream key."""
        return Stream(self.seed, stream)
