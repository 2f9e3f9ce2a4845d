"""Named random sub-streams derived from one experiment seed.

Each consumer (weight init, training masks, structured split, MC sampling,
data shuffling) draws from its own stream so that enabling one feature never
shifts the numbers another one sees.
"""

from __future__ import annotations

import numpy as np

STREAMS = {"init": 0, "trainmask": 1, "split": 2, "mc": 3, "shuffle": 4, "noise": 5}


def stream(seed: int, name: str) -> np.random.Generator:
    if name not in STREAMS:
        raise KeyError(f"unknown random stream {name!r}; known: {sorted(STREAMS)}")
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(STREAMS[name],)))
