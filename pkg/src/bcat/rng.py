"""Portable PRNG: xoshiro256** seeded through splitmix64.

Used wherever a draw sequence must be reproducible independently of numpy's
generator implementation (data generation, data order, seed derivation).
"""

from __future__ import annotations

import math

import numpy as np

MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> tuple[int, int]:
    """One splitmix64 step. Returns (output, new_state)."""
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31), x


def derive_seed(seed: int, index: int) -> int:
    """Per-item seed: splitmix64 output of (seed + index)."""
    out, _ = splitmix64((seed + index) & MASK64)
    return out


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class Rng:
    """xoshiro256** with a splitmix64-expanded 64-bit seed."""

    def __init__(self, seed: int):
        self.seed = seed & MASK64
        sm = self.seed
        s = []
        for _ in range(4):
            out, sm = splitmix64(sm)
            s.append(out)
        self._s = s

    def next_u64(self) -> int:
        s = self._s
        result = (_rotl((s[1] * 5) & MASK64, 7) * 9) & MASK64
        t = (s[1] << 17) & MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        # top 53 bits -> [0, 1)
        u = (self.next_u64() >> 11) * (1.0 / (1 << 53))
        return lo + (hi - lo) * u

    def integers(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi)."""
        n = hi - lo
        if n <= 0:
            raise ValueError("empty integer range")
        # rejection sampling keeps the draw unbiased
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return lo + x % n

    def normal(self) -> float:
        # Box-Muller; u1 kept away from 0
        u1 = 1.0 - self.uniform()
        u2 = self.uniform()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def permutation(self, n: int) -> list[int]:
        """Fisher-Yates shuffle of range(n)."""
        p = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.integers(0, i + 1)
            p[i], p[j] = p[j], p[i]
        return p

    def numpy_generator(self) -> np.random.Generator:
        """A numpy Generator seeded from this stream, for bulk draws."""
        return np.random.Generator(np.random.PCG64(self.next_u64()))
