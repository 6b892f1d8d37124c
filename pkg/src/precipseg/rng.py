"""Portable counter-based random number streams.

Every stochastic choice in the package (weight init, dropout masks, data
shuffling, synthetic scenes) draws from the generator defined here, so a
single integer seed reproduces a whole run bit-for-bit.

The generator is a keyed SplitMix64: the i-th raw word of stream ``s``
under seed ``k`` is

    mix(key + (i + 1) * GOLDEN),  key = mix(mix(k) + s)

where ``mix`` is the SplitMix64 finalizer and GOLDEN = 0x9E3779B97F4A7C15.
Uniform doubles take the top 53 bits of a word; normal deviates come from
Box-Muller applied to consecutive uniform pairs (pair j yields outputs
2j and 2j+1). All arithmetic is modulo 2**64.
"""

from __future__ import annotations

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    # SplitMix64 finalizer, vectorized over uint64 arrays.
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


def _key(seed: int, stream: int) -> np.uint64:
    s = _mix(np.uint64(np.uint64(seed) & np.uint64(0xFFFFFFFFFFFFFFFF)))
    with np.errstate(over="ignore"):
        return np.uint64(_mix(s + np.uint64(stream & 0xFFFFFFFFFFFFFFFF)))


def derive(seed: int, *words: int) -> int:
    """Fold extra integers into a seed, for namespacing sub-streams."""
    z = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
    for w in words:
        with np.errstate(over="ignore"):
            z = _mix(z + np.uint64(w & 0xFFFFFFFFFFFFFFFF) * GOLDEN)
    return int(z)


def raw(seed: int, stream: int, count: int, start: int = 0) -> np.ndarray:
    """``count`` raw uint64 words of the stream, beginning at index ``start``."""
    idx = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return _mix(_key(seed, stream) + idx * GOLDEN)


def uniforms(seed: int, stream: int, count: int, start: int = 0) -> np.ndarray:
    """float64 uniforms in [0, 1)."""
    return (raw(seed, stream, count, start) >> np.uint64(11)) * 2.0 ** -53


def normals(seed: int, stream: int, count: int, start: int = 0) -> np.ndarray:
    """float64 standard normal deviates via Box-Muller.

    ``start`` must index pair boundaries (even) for reproducible slices;
    callers that need contiguous draws should track counts themselves.
    """
    pairs = (count + 1) // 2
    # u1 in (0, 1] so log(u1) is finite.
    w = raw(seed, stream, 2 * pairs, start)
    u1 = ((w[0::2] >> np.uint64(11)) + np.uint64(1)) * 2.0 ** -53
    u2 = (w[1::2] >> np.uint64(11)) * 2.0 ** -53
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    out = np.empty(2 * pairs, dtype=np.float64)
    out[0::2] = r * np.cos(theta)
    out[1::2] = r * np.sin(theta)
    return out[:count]


def permutation(seed: int, stream: int, n: int) -> np.ndarray:
    """Deterministic permutation of range(n) (argsort of one uniform draw)."""
    keys = uniforms(seed, stream, n)
    return np.argsort(keys, kind="stable")
