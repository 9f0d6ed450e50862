"""Deterministic random number source.

Thin wrapper over numpy's PCG64 generator. A given seed produces the same
stream on every platform, and ``spawn`` derives statistically independent
child streams deterministically, so per-actor randomness stays reproducible
no matter how many actors run.
"""
from __future__ import annotations

import numpy as np


class Rng:
    """Seeded random source. Same seed, same spawn path -> same stream."""

    def __init__(self, seed: int, _spawn_key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.spawn_key = _spawn_key
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=_spawn_key)
        self._gen = np.random.Generator(np.random.PCG64(seq))

    def spawn(self, key: int) -> "Rng":
        """Derive an independent child stream identified by ``key``."""
        return Rng(self.seed, self.spawn_key + (int(key),))

    def normal(self, shape=(), scale: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(size=shape) * scale

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int | None = None, size=None):
        return self._gen.integers(low, high, size=size)

    def choice(self, n: int, p: np.ndarray | None = None) -> int:
        """Sample an index in [0, n) with optional probabilities ``p``."""
        if p is None:
            return int(self._gen.integers(n))
        # Inverse-CDF keeps the draw reproducible from a single uniform.
        u = self._gen.uniform()
        return int(min(np.searchsorted(np.cumsum(p), u), n - 1))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, spawn_key={self.spawn_key})"
