"""Named random sub-streams derived from one integer seed."""
from __future__ import annotations

import numpy as np

STREAMS = {"data": 0, "init": 1, "shuffle": 2, "split": 3, "test": 4}


def rng_for(seed: int, stream: str, *keys: int) -> np.random.Generator:
    """Independent generator for ``stream`` (and optional integer sub-keys)."""
    seq = np.random.SeedSequence(int(seed), spawn_key=(STREAMS[stream], *map(int, keys)))
    return np.random.default_rng(seq)
