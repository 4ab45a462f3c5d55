"""SplitMix64 pseudo-random generator with named independent streams.

Every random decision in the package (initialisation, dropout masks,
shuffling, sampling) draws from one of these generators so that a run is
reproducible bit-for-bit from a single integer seed on any platform.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash of ``data``."""
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


def _mix(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


def _mix_int(value: int) -> int:
    return int(_mix(np.array([value & _MASK64], dtype=np.uint64))[0])


class SplitMix64:
    """Vectorised SplitMix64.

    ``derive(name)`` returns a generator whose sequence depends only on the
    original seed and ``name``, never on how much this generator has been
    consumed.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._state = self.seed

    def derive(self, name: str) -> "SplitMix64":
        return SplitMix64(_mix_int(self.seed ^ fnv1a64(name.encode("utf-8"))))

    def next_uint64(self, n: int) -> np.ndarray:
        n = int(n)
        if n <= 0:
            return np.zeros(0, dtype=np.uint64)
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            states = np.uint64(self._state) + steps * _GOLDEN
        self._state = int(states[-1])
        return _mix(states)

    def random(self, shape=()) -> np.ndarray:
        """Uniform floats in [0, 1) with 53 random bits each."""
        size = int(np.prod(shape, dtype=np.int64)) if shape != () else 1
        bits = self.next_uint64(size) >> np.uint64(11)
        out = bits.astype(np.float64) * (1.0 / 9007199254740992.0)
        return out.reshape(shape) if shape != () else out[0]

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return low + (high - low) * self.random(shape)

    def keep_mask(self, shape, p: float) -> np.ndarray:
        """Boolean mask with each entry kept (True) with probability 1 - p."""
        return self.random(shape) >= p

    def permutation(self, n: int) -> np.ndarray:
        keys = self.next_uint64(n)
        return np.argsort(keys, kind="stable")

    def integers(self, high: int, size: int | None = None):
        """Uniform integers in [0, high)."""
        vals = np.floor(self.random(() if size is None else (size,)) * high).astype(np.int64)
        return int(vals) if size is None else vals

    def choice(self, probs: np.ndarray) -> int:
        """Sample an index from a discrete distribution."""
        cdf = np.cumsum(probs)
        u = float(self.random()) * cdf[-1]
        idx = int(np.searchsorted(cdf, u, side="right"))
        return min(idx, len(probs) - 1)
