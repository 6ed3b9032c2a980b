"""Deterministic random streams.

Every stochastic choice in the package draws from a generator derived from
(user seed, domain tag, indices...), so runs are reproducible and training
can resume mid-stream: epoch k always sees the same shuffle and the same
sampled negatives regardless of how the process got there.
"""

from __future__ import annotations

import numpy as np

DOCUMENT = 1
QUERY = 2
SPLIT = 3
INIT = 4
BATCH = 5
NEGATIVES = 6
VAL = 7
SWAP = 8


def seeded_rng(*entropy: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(tuple(int(e) for e in entropy)))
