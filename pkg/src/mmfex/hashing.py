"""Deterministic, platform-independent hashing and random streams.

Everything stochastic in the pipeline (reference projections, splits) is
derived from these primitives so outputs depend only on the seed.
"""

from __future__ import annotations

import numpy as np

MASK64 = 0xFFFFFFFFFFFFFFFF
GOLDEN_GAMMA = 0x9E3779B97F4A7C15

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3


def fnv1a_64(data: str | bytes) -> int:
    if isinstance(data, str):
        data = data.encode("utf-8")
    h = FNV64_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV64_PRIME) & MASK64
    return h


def _fmix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    """Scalar SplitMix64 generator."""

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        return _fmix64(self.state)

    def uniform(self, low: float = 0.0, high: float = 1.0) -> float:
        u = (self.next_u64() >> 11) * (1.0 / (1 << 53))
        return low + (high - low) * u


def mix(seed: int, key: int) -> int:
    """Combine a seed with an integer key into a new 64-bit seed."""
    return _fmix64((seed & MASK64) ^ _fmix64((key + GOLDEN_GAMMA) & MASK64))


def tag_seed(seed: int, tag: str) -> int:
    return mix(seed, fnv1a_64(tag))


# Vectorised twins of the scalar functions above; uint64 arithmetic in numpy
# wraps modulo 2**64, which is exactly what SplitMix64 needs.

def _fmix64_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def mix_array(seed: int, keys: np.ndarray) -> np.ndarray:
    keys = keys.astype(np.uint64, copy=False)
    inner = _fmix64_array(keys + np.uint64(GOLDEN_GAMMA))
    return _fmix64_array(np.uint64(seed & MASK64) ^ inner)


def uniform_matrix(seed: int, rows: int, cols: int, low: float = -1.0, high: float = 1.0) -> np.ndarray:
    """Matrix whose entry [i, j] is the first draw of SplitMix64(mix(seed, i*cols + j)).

    Equal, bit for bit, to looping over :class:`SplitMix64` per entry.
    """
    keys = np.arange(rows * cols, dtype=np.uint64)
    with np.errstate(over="ignore"):
        stream_seeds = mix_array(seed, keys)
        first = _fmix64_array(stream_seeds + np.uint64(GOLDEN_GAMMA))
    unit = (first >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
    return (low + (high - low) * unit).reshape(rows, cols)
