"""Counter-based random streams keyed by (seed, batch, sample index)."""
from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def stream(seed: int, batch: int = 0, index: int = 0) -> np.random.Generator:
    """Independent Philox generator for one sample of one batch.

    The sample index occupies the high counter word, so every sample has its
    own non-overlapping block of the (seed, batch) stream.
    """
    key = (int(seed) & _MASK64) | ((int(batch) & _MASK64) << 64)
    bg = np.random.Philox(key=key)
    bg.advance(int(index) << 128)
    return np.random.Generator(bg)


def uniform_rows(seed: int, batch: int, start: int, count: int, lo, hi) -> np.ndarray:
    """Rows start..start+count-1 of a reproducible uniform design over [lo, hi]."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    out = np.empty((count, lo.size))
    for i in range(count):
        out[i] = stream(seed, batch, start + i).uniform(lo, hi)
    return out
