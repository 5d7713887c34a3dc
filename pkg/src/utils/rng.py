"""Seeded random streams for the Layout Lab.

A single root seed feeds a xoshiro256++ generator (state expanded with
splitmix64). Named substreams are derived from the root seed and the
substream path, so a stream's values do not depend on how many draws other
streams have made.
"""

import logging
from typing import Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1


def splitmix64(state: int) -> Tuple[int, int]:
    """Advance a splitmix64 state; returns (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


def _fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & MASK64
    return h


class Xoshiro256pp:
    """xoshiro256++ 1.0 with a splitmix64-expanded seed."""

    def __init__(self, seed: int):
        sm = seed & MASK64
        state = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            state.append(out)
        self.s = state

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self.s
        result = (_rotl((s0 + s3) & MASK64, 23) + s0) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self.s = [s0, s1, s2, s3]
        return result

    def random(self) -> float:
        """Uniform double in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))


class Rng:
    """
    Root or named random stream.

    Scalar decisions draw from xoshiro256++ directly; bulk variates come from
    a numpy Generator seeded once from this stream.
    """

    def __init__(self, seed: int, path: str = "root"):
        self.seed = int(seed) & MASK64
        self.path = path
        self._core = Xoshiro256pp(self.seed)
        self._np: Optional[np.random.Generator] = None

    def substream(self, name: str) -> "Rng":
        """Independent stream identified by this stream's path plus name."""
        path = f"{self.path}/{name}"
        _, derived = splitmix64(self.seed ^ _fnv1a64(path))
        return Rng(derived, path)

    def next_u64(self) -> int:
        return self._core.next_u64()

    def random(self) -> float:
        return self._core.random()

    @property
    def np(self) -> np.random.Generator:
        if self._np is None:
            self._np = np.random.Generator(np.random.PCG64(self._core.next_u64()))
        return self._np

    def normal(self, size=None, loc: float = 0.0, scale: float = 1.0):
        return self.np.normal(loc, scale, size)

    def integers(self, low: int, high: int, size=None):
        """Integers in [low, high)."""
        return self.np.integers(low, high, size)

    def __repr__(self) -> str:
        return f"Rng(path={self.path!r})"
