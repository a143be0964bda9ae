"""Counter-based deterministic random number generation.

All randomness in the package flows through Philox generators keyed by
(seed, stream) with a 128-bit counter offset per index. This makes every
draw a pure function of (seed, stream, index, shape): training can resume
mid-run, batches can be assembled in any order, and sampling stays
bit-exact across runs and platforms.
"""

from __future__ import annotations

import numpy as np

# Named streams. Each purpose gets its own key so adding draws to one
# consumer never perturbs another.
STREAM_INIT = 0
STREAM_NOISE = 1
STREAM_TIMESTEP = 2
STREAM_BATCH = 3
STREAM_DROPOUT = 4
STREAM_SAMPLER = 5
STREAM_DATA = 6


def philox_generator(seed: int, stream: int = 0, index: int = 0) -> np.random.Generator:
    """Generator for (seed, stream) positioned at a 2**128-spaced counter block.

    Distinct indices can each consume up to 2**128 values without overlap.
    """
    key = np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF), np.uint64(stream)], dtype=np.uint64)
    counter = np.array([0, 0, np.uint64(index & 0xFFFFFFFFFFFFFFFF), 0], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def seeded_gaussian(shape, seed: int, stream: int = 0, index: int = 0) -> np.ndarray:
    """Unit Gaussian array, bit-exact for identical (seed, stream, index, shape)."""
    return philox_generator(seed, stream, index).standard_normal(shape, dtype=np.float64)
