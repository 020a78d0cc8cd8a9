"""Seed expansion.

Every random stream is derived from ``(seed, *stream_ids)`` through
:class:`numpy.random.SeedSequence`, so streams never depend on the order in
which other streams were consumed.
"""

import numpy as np

# Stream identifiers. Keep these stable: changing them changes every result.
INIT = 0
SHUFFLE = 1
NOISE = 2
SPLIT = 3
KMEANS = 4
SYNTH = 5
CLASSIFY = 6


def stream(seed: int, *ids: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(i) for i in ids))
    return np.random.Generator(np.random.PCG64(ss))
