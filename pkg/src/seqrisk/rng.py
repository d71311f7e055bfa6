"""Deterministic random number generation with stable sub-stream splitting."""

from __future__ import annotations

import numpy as np

_MASK64 = 0xFFFFFFFFFFFFFFFF


def splitmix64(state: int) -> int:
    """One step of the splitmix64 mixer (Steele et al.), on 64-bit state."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _mix_key(seed: int, key: str | int) -> int:
    """Fold a string or integer key into a seed via FNV-1a then splitmix64."""
    if isinstance(key, int):
        h = key & _MASK64
    else:
        h = 0xCBF29CE484222325
        for byte in key.encode("utf-8"):
            h = ((h ^ byte) * 0x100000001B3) & _MASK64
    return splitmix64(seed ^ h)


class Rng:
    """Seeded random stream.

    Bulk draws come from numpy's PCG64; sub-streams are derived by mixing
    a key into the seed with splitmix64, so per-item streams are stable
    regardless of draw order elsewhere.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def split(self, key: str | int) -> "Rng":
        """Derive an independent child stream from a string/integer key."""
        return Rng(_mix_key(self.seed, key))

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high, size=None):
        """Uniform integers in [low, high)."""
        return self._gen.integers(low, high, size=size)

    def random(self, size=None):
        return self._gen.random(size)

    def poisson(self, lam, size=None):
        return self._gen.poisson(lam, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def shuffle(self, x) -> None:
        self._gen.shuffle(x)

    def choice(self, a, size=None, p=None, replace=True):
        return self._gen.choice(a, size=size, p=p, replace=replace)
