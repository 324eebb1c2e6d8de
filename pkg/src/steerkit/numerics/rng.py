"""Seeded random streams.

Every random draw in the package goes through :class:`Rng`, a Philox-4x64
counter-based generator keyed by ``(seed, stream)``. Gaussians use the
Box-Muller transform and gammas use Marsaglia-Tsang on top of those normals,
so a sequence is fully determined by the published algorithms rather than by
numpy's internal samplers.
"""

from __future__ import annotations

import math
import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def stream_id(name: str) -> int:
    """Stable 64-bit stream id for a human-readable label."""
    data = name.encode()
    return (zlib.crc32(data) << 32 | zlib.crc32(data[::-1])) & _MASK64


class Rng:
    """Random stream identified by a 64-bit seed and a 64-bit stream id."""

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream})"

    def child(self, index: int | str) -> "Rng":
        """Independent stream ``(seed, stream ^ index)``; strings are hashed first."""
        if isinstance(index, str):
            index = stream_id(index)
        return Rng(self.seed, self.stream ^ (int(index) & _MASK64))

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        """Uniform on ``[low, high)`` from 53-bit doubles."""
        u = self._gen.random(size)
        return low + (high - low) * u

    def log_uniform(self, low: float, high: float, size=None):
        return np.exp(self.uniform(math.log(low), math.log(high), size))

    def integers(self, low: int, high: int | None = None, size=None):
        """Integers on ``[low, high)`` (or ``[0, low)``)."""
        if high is None:
            low, high = 0, low
        u = self._gen.random(size)
        out = np.floor(low + (high - low) * u).astype(np.int64)
        return np.minimum(out, high - 1) if size is not None else int(min(out, high - 1))

    def normal(self, size=None, mean: float = 0.0, std: float = 1.0):
        """Gaussian draws via Box-Muller (cosine branch only, one pair per draw)."""
        n = 1 if size is None else int(np.prod(size))
        u1 = 1.0 - self._gen.random(n)  # (0, 1]
        u2 = self._gen.random(n)
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        z = mean + std * z
        return float(z[0]) if size is None else z.reshape(size)

    def gamma(self, shape: float) -> float:
        """Marsaglia-Tsang gamma(shape, 1) sampler."""
        if shape <= 0:
            raise ValueError(f"gamma shape must be positive, got {shape}")
        if shape < 1.0:
            u = 1.0 - float(self._gen.random())
            return self.gamma(shape + 1.0) * u ** (1.0 / shape)
        d = shape - 1.0 / 3.0
        c = 1.0 / math.sqrt(9.0 * d)
        while True:
            x = self.normal()
            v = (1.0 + c * x) ** 3
            if v <= 0:
                continue
            u = 1.0 - float(self._gen.random())
            if math.log(u) < 0.5 * x * x + d - d * v + d * math.log(v):
                return d * v

    def dirichlet(self, alpha) -> np.ndarray:
        g = np.array([self.gamma(float(a)) for a in alpha])
        return g / g.sum()

    def categorical(self, probs, size=None):
        """Inverse-CDF categorical draws."""
        cdf = np.cumsum(np.asarray(probs, dtype=np.float64))
        cdf /= cdf[-1]
        u = self._gen.random(size)
        idx = np.searchsorted(cdf, u, side="right")
        idx = np.minimum(idx, len(cdf) - 1)
        return idx if size is not None else int(idx)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)`` driven by :meth:`integers`."""
        out = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.integers(0, i + 1)
            out[i], out[j] = out[j], out[i]
        return out
