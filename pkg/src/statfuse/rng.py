"""Counter-based random numbers keyed by row identity.

A draw is a pure function of ``(seed, implicate, step, slot, row key)``, so
results cannot depend on chunk boundaries, row order or worker layout.
The mixer is the splitmix64 finaliser.
"""

from __future__ import annotations

import numpy as np
import pandas as pd

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(x: np.ndarray) -> np.ndarray:
    z = x + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def row_keys(ids) -> np.ndarray:
    """Stable 64-bit keys for row identifiers (compared as strings)."""
    arr = np.asarray(ids).astype(str).astype(object)
    return pd.util.hash_array(arr, categorize=False)


def uniforms(keys, seed: int, implicate: int, step: int, slot: int = 0) -> np.ndarray:
    """U[0, 1) numbers, one per key, for a given stream coordinate."""
    with np.errstate(over="ignore"):
        h = np.array([seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
        for part in (implicate, step, slot):
            h = _mix(h ^ np.uint64(part & 0xFFFFFFFFFFFFFFFF))
        z = _mix(np.asarray(keys, dtype=np.uint64) ^ h[0])
    return (z >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
