"""Reproducible random-number streams.

Streams are built on numpy's counter-based Philox generator, keyed by the
experiment seed plus a tuple of integer tags (replica block, stream purpose).
A stream's output depends only on its key, never on scheduling order, so
ensembles give identical results no matter how replicas are distributed over
workers.

Ensembles are partitioned into fixed-size replica blocks; every block owns one
stream and is always processed as a unit.  Splitting the same ensemble over 1
or 8 workers therefore consumes identical draws.
"""

from __future__ import annotations

import numpy as np

BLOCK_SIZE = 8192

STREAM_CHAIN = 0
STREAM_COUPLING = 1
STREAM_INIT = 2
STREAM_STATES = 3


def stream(seed: int, *key: int) -> np.random.Generator:
    """Return the Philox generator identified by ``(seed, *key)``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def block_bounds(n_total: int, block_size: int = BLOCK_SIZE) -> list[tuple[int, int]]:
    """Partition ``range(n_total)`` into consecutive blocks of fixed size."""
    return [(lo, min(lo + block_size, n_total)) for lo in range(0, n_total, block_size)]
