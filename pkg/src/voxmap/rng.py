"""Seeded, splittable random streams.

Every stochastic routine in the package draws from a named substream of a
single 64-bit seed.  Streams are backed by the counter-based Philox engine,
so draws are platform-independent and independent streams can be derived
for any (seed, path) pair without coordination.
"""

from __future__ import annotations

import numpy as np

_MIX = 0x9E3779B97F4A7C15  # splitmix64 increment


def _mix64(state: int, value: int) -> int:
    z = (state + _MIX + value) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


def _label_to_int(label) -> int:
    if isinstance(label, int):
        return label & 0xFFFFFFFFFFFFFFFF
    acc = 0
    for byte in str(label).encode("utf-8"):
        acc = _mix64(acc, byte)
    return acc


def stream_key(seed: int, *path) -> int:
    """128-bit Philox key for a named substream of ``seed``."""
    lo = seed & 0xFFFFFFFFFFFFFFFF
    hi = _mix64(lo, 0x5EED)
    for part in path:
        hi = _mix64(hi, _label_to_int(part))
        lo = _mix64(lo ^ hi, _label_to_int(part))
    return (hi << 64) | lo


def substream(seed: int, *path) -> np.random.Generator:
    """Independent generator for (seed, *path); path parts are ints or strings."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, *path)))
