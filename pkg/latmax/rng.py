"""Seeded, counter-based random streams.

Every random draw in the package comes from a Philox generator keyed by
``SeedSequence(seed, spawn_key=(tag, *index))``. The same (seed, tag, index)
always yields the same stream, independently of which thread consumes it or
in which order streams are created.
"""

import numpy as np

__all__ = ["SAMPLE", "SIMULATE", "LOOKUP", "SUBSAMPLE", "BOUNDARY", "stream", "derive_seed"]

# stream namespaces
SAMPLE = 1
SIMULATE = 2
LOOKUP = 3
SUBSAMPLE = 4
BOUNDARY = 5  # one child seed per boundary neighbour pattern

_MASK64 = (1 << 64) - 1


def stream(seed: int, tag: int, *index: int) -> np.random.Generator:
    """Return the generator for stream ``index`` within namespace ``tag``."""
    ss = np.random.SeedSequence(int(seed) & _MASK64, spawn_key=(int(tag), *(int(i) for i in index)))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, tag: int, *index: int) -> int:
    """Derive a child 64-bit seed, used where a callee takes a plain integer seed."""
    ss = np.random.SeedSequence(int(seed) & _MASK64, spawn_key=(int(tag), *(int(i) for i in index)))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
