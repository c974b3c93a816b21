"""Counter-based random streams.

Every random draw in the package comes from a Philox generator keyed by
``(seed, *key)``.  Replicas, μ-resamples and auxiliary streams use disjoint
keys, so results never depend on scheduling order or thread count.
"""

from __future__ import annotations

import numpy as np

# stream tags used as the first element of the key
PATH = 0
MU_SAMPLE = 1
AUX = 2


def make_rng(seed, *key: int) -> np.random.Generator:
    """Return a Philox generator for ``seed`` and an integer key path.

    ``make_rng(s)`` and ``make_rng(s, *())`` are the same stream.
    """
    if isinstance(seed, np.random.Generator):
        if key:
            raise TypeError("cannot derive keyed substreams from a Generator")
        return seed
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def replica_rng(seed, replica: int, stream: int = PATH) -> np.random.Generator:
    return make_rng(seed, stream, replica)
