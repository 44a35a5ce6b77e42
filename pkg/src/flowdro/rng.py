"""Seeded random streams.

Every stochastic routine takes an integer seed (or an existing Generator)
and draws from numpy's counter-based Philox bit generator, so reruns with
the same seed are bit-identical within this implementation.
"""

import numpy as np

ALGORITHM = "numpy.random.Philox"


def make_rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(int(seed)))


def child_seed(seed, *keys):
    """Deterministic integer seed derived from a base seed and a key path."""
    ss = np.random.SeedSequence([int(seed)] + [int(k) for k in keys])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
