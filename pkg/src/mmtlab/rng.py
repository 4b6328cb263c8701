"""Deterministic, platform-independent random streams.

Schedules and substitution draws must reproduce bit-exactly across runs and
platforms, so the shuffle path avoids numpy's RNG entirely: every stream is a
SplitMix64 sequence keyed by (seed, stream name), and shuffles are classic
Fisher-Yates over that sequence. Bulk array sampling (noise, weight init)
derives a 64-bit key from the same stream and feeds it to numpy's PCG64.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1

# SplitMix64 constants (Steele, Lea, Flood 2014).
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

# FNV-1a 64-bit, used only to hash stream names into the seed.
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def _mix64(z: int) -> int:
    z &= _MASK64
    z ^= z >> 30
    z = (z * _MIX1) & _MASK64
    z ^= z >> 27
    z = (z * _MIX2) & _MASK64
    z ^= z >> 31
    return z


def _fnv1a(name: str) -> int:
    h = _FNV_OFFSET
    for byte in name.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def derive_key(seed: int, name: str, counter: int = 0) -> int:
    """64-bit key for (seed, stream name, counter), stable across platforms."""
    return _mix64((seed & _MASK64) ^ _fnv1a(name) ^ _mix64(counter))


class Stream:
    """A named SplitMix64 stream.

    Two streams with the same (seed, name) produce identical sequences; the
    training loop and the protocol code own disjoint names ("random-replace",
    "train-missing", "test-missing", ...) so consumers never interleave.
    """

    def __init__(self, seed: int, name: str):
        self.seed = seed
        self.name = name
        self._state = derive_key(seed, name)

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK64
        return _mix64(self._state)

    def uniform(self) -> float:
        """Uniform float in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * 2.0**-53

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n) via rejection sampling (unbiased)."""
        if n <= 0:
            raise ValueError(f"randint bound must be positive, got {n}")
        limit = _MASK64 - (_MASK64 % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def shuffle(self, items: list) -> list:
        """In-place Fisher-Yates shuffle; returns the same list."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]
        return items

    def numpy_rng(self) -> np.random.Generator:
        """Fresh numpy generator keyed by the next stream value."""
        return np.random.Generator(np.random.PCG64(self.next_u64()))


def sample_rng(seed: int, name: str, index: int) -> np.random.Generator:
    """Counter-based per-sample generator; independent of iteration order."""
    return np.random.Generator(np.random.PCG64(derive_key(seed, name, index)))
