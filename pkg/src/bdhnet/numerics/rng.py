"""Seeded, splittable random streams (Philox counter-based generator)."""

from __future__ import annotations

import numpy as np


class Rng:
    """Thin wrapper over ``numpy.random.Generator(Philox)``.

    ``split(key)`` derives an independent child stream from the seed and a
    string key, so adding a new consumer never shifts the draws of another.
    """

    def __init__(self, seed: int, _key: tuple = ()):
        if not 0 <= int(seed) < 2 ** 64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")
        self.seed = int(seed)
        self._key = _key
        entropy = [self.seed & 0xFFFFFFFF, self.seed >> 32, *_key]
        self.gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

    def split(self, key: str) -> "Rng":
        words = tuple(int.from_bytes(key.encode("utf-8")[i:i + 4].ljust(4, b"\0"), "little")
                      for i in range(0, max(len(key.encode("utf-8")), 1), 4))
        return Rng(self.seed, self._key + (len(words),) + words)

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self.gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None) -> np.ndarray:
        return self.gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self.gen.integers(low, high, size)

    def permutation(self, n) -> np.ndarray:
        return self.gen.permutation(n)

    def choice(self, a, size=None, replace=True):
        return self.gen.choice(a, size=size, replace=replace)
