"""Named PRNG streams derived from a single 64-bit seed.

Every random draw in the package goes through :func:`stream`, which feeds
``(seed, *keys)`` into a :class:`numpy.random.SeedSequence` spawn key and
returns a PCG64 generator. Streams with different keys are statistically
independent, and a given ``(seed, keys)`` pair always yields the same draws.

Key layout used throughout::

    stream(seed, DATA)           training data
    stream(seed, VALID)          validation data
    stream(seed, TEST)           test data
    stream(seed, INIT)           network initialization
    stream(seed, SHUFFLE, epoch) minibatch order for one epoch
"""
from __future__ import annotations

import numpy as np

DATA = 0
VALID = 1
TEST = 2
INIT = 3
SHUFFLE = 4
COLLECT = 5
ROLLOUT = 6

_MASK64 = (1 << 64) - 1


def stream(seed: int, *keys: int) -> np.random.Generator:
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    ss = np.random.SeedSequence(entropy=int(seed) & _MASK64, spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


def derive(seed: int, *keys: int) -> int:
    """Collapse ``(seed, *keys)`` into a fresh 64-bit seed."""
    ss = np.random.SeedSequence(entropy=int(seed) & _MASK64, spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
