"""Seeded random streams.

Every random draw in the package goes through :func:`make_rng`, which wraps
NumPy's PCG64 bit generator (PCG-XSL-RR 128/64). Its output stream for a given
integer seed is fixed by the algorithm, so seeds reproduce across platforms.
Child seeds are derived with :class:`numpy.random.SeedSequence` hashing, never
from wall-clock time or OS entropy.
"""

from __future__ import annotations

import numpy as np


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed)))


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministically derive a 63-bit child seed from ``seed`` and ``keys``."""
    state = np.random.SeedSequence([int(seed), *(int(k) for k in keys)]).generate_state(
        2, dtype=np.uint32
    )
    return int((int(state[0]) << 31) ^ int(state[1]))
