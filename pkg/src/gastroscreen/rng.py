"""Deterministic counter-based random number generation.

Every stochastic operation in the package draws from these helpers so that
results are reproducible bit-for-bit and independent of pixel iteration
order or parallel scheduling. The primitive is the splitmix64 finalizer
applied to (seed, counter) pairs: each counter yields an independent 64-bit
word with no sequential state to thread through callers.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "MASK64",
    "derive_seed",
    "uniform",
    "uniforms",
    "uniform_field",
    "normal_field",
    "permutation",
]

MASK64 = 0xFFFFFFFFFFFFFFFF

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_INV53 = float(2.0**-53)


def _finalize(z: np.ndarray) -> np.ndarray:
    """splitmix64 output function on uint64 arrays (wraparound arithmetic)."""
    z = z + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def _finalize_int(z: int) -> int:
    """splitmix64 output function on plain ints (avoids numpy scalar overflow warnings)."""
    z = (z + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def _words(part) -> list[int]:
    if isinstance(part, (int, np.integer)):
        return [int(part) & MASK64]
    if isinstance(part, str):
        data = part.encode("utf-8")
        return [
            int.from_bytes(data[i : i + 8].ljust(8, b"\0"), "little")
            for i in range(0, max(len(data), 1), 8)
        ]
    raise TypeError(f"cannot fold {type(part).__name__} into a seed")


def derive_seed(seed: int, *parts: int | str) -> int:
    """Derive an independent child seed from a parent seed and a tag path.

    Tags may be ints or short strings; distinct tag paths give unrelated
    streams, so callers never share counters by accident.
    """
    h = np.uint64(seed & MASK64)
    for part in parts:
        for word in _words(part):
            h = _finalize(h ^ np.uint64(word))
    return int(_finalize(h))


def _counter_values(seed: int, counters: np.ndarray) -> np.ndarray:
    key = _finalize(np.uint64(seed & MASK64))
    return _finalize(key ^ counters)


def uniforms(seed: int, n: int) -> np.ndarray:
    """n floats in [0, 1), one per counter 0..n-1."""
    counters = np.arange(n, dtype=np.uint64)
    vals = _counter_values(seed, counters)
    return (vals >> np.uint64(11)).astype(np.float64) * _INV53


def uniform(seed: int) -> float:
    """Single float in [0, 1) for this seed."""
    return float(uniforms(seed, 1)[0])


def uniform_field(seed: int, height: int, width: int) -> np.ndarray:
    """(height, width) float64 field in [0, 1), keyed per pixel.

    The value at (x, y) depends only on (seed, x, y), not on the field
    dimensions or on evaluation order.
    """
    ys = (np.arange(height, dtype=np.uint64) << np.uint64(32))[:, None]
    xs = np.arange(width, dtype=np.uint64)[None, :]
    vals = _counter_values(seed, ys | xs)
    return (vals >> np.uint64(11)).astype(np.float64) * _INV53


def normal_field(seed: int, height: int, width: int) -> np.ndarray:
    """(height, width) standard normal field via Box-Muller on two keyed streams."""
    u1 = uniform_field(derive_seed(seed, "bm-u1"), height, width)
    u2 = uniform_field(derive_seed(seed, "bm-u2"), height, width)
    # shift u1 off zero so log() is finite
    u1 = (u1 * (1.0 - 2.0 * _INV53)) + _INV53
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * math.pi * u2)


def permutation(n: int, seed: int) -> np.ndarray:
    """Deterministic Fisher-Yates permutation of range(n)."""
    idx = np.arange(n, dtype=np.int64)
    if n < 2:
        return idx
    draws = _counter_values(seed, np.arange(n - 1, dtype=np.uint64))
    for i in range(n - 1, 0, -1):
        j = int(draws[n - 1 - i] % np.uint64(i + 1))
        idx[i], idx[j] = idx[j], idx[i]
    return idx
