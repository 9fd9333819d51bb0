"""Deterministic RNG stream derivation.

Every random draw in the package flows from one integer seed through
labeled streams, so results are independent of scheduling and worker
count. Streams are keyed by (seed, stream label, ...context ints).
"""

from __future__ import annotations

import numpy as np

STREAM_SYNTH = 1
STREAM_INIT = 2
STREAM_SHUFFLE = 3
STREAM_VIEWS = 4
STREAM_BASELINE = 5


def derive_rng(*keys: int) -> np.random.Generator:
    """Generator seeded by an ordered tuple of non-negative integer keys."""
    entropy = [int(k) for k in keys]
    if any(k < 0 for k in entropy):
        raise ValueError("rng stream keys must be non-negative")
    return np.random.default_rng(np.random.SeedSequence(entropy))
