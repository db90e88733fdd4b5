"""Deterministic 64-bit seed derivation for parallel experiment grids.

Per-job seeds are a pure function of the base seed and the job
coordinates, so scheduling order and worker count never change results.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


def mix64(*coords) -> int:
    """Mix a base seed and job coordinates into one 64-bit seed.

    Accepts ints and strings; strings hash by their UTF-8 bytes so that
    coordinate names participate deterministically.
    """
    acc = 0x243F6A8885A308D3
    for c in coords:
        if isinstance(c, str):
            for b in c.encode("utf-8"):
                acc = _splitmix64(acc ^ b)
        else:
            acc = _splitmix64(acc ^ (int(c) & _MASK))
    return acc


def rng_for(*coords) -> np.random.Generator:
    return np.random.default_rng(mix64(*coords))
