"""Counter-based random streams.

Every stream is a Philox generator keyed by ``(seed, *key)``; deriving a child
stream with :meth:`Rng.fold` never advances the parent, so a dropout mask can
be replayed from ``(seed, step, ratio, view)`` alone.
"""

from __future__ import annotations

import numpy as np


class Rng:
    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        if not 0 <= seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self._bitgen = np.random.Philox(ss)
        self._gen = np.random.Generator(self._bitgen)

    def fold(self, *key: int) -> "Rng":
        """Independent child stream for ``key``; the parent is untouched."""
        return Rng(self.seed, self.key + tuple(key))

    @property
    def position(self) -> int:
        """Philox block counter, i.e. how far this stream has advanced."""
        counter = self._bitgen.state["state"]["counter"]
        return int(sum(int(c) << (64 * i) for i, c in enumerate(counter)))

    def uniform(self, size=None) -> np.ndarray:
        return self._gen.random(size)

    def normal(self, size=None) -> np.ndarray:
        return self._gen.standard_normal(size)

    def gamma(self, shape: float, size=None) -> np.ndarray:
        return self._gen.standard_gamma(shape, size)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, key={self.key})"
