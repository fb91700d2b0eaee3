"""Keyed, counter-based random streams.

Each stream is a Philox generator whose key is derived from the run seed plus
an arbitrary tuple of integers (epoch, batch, op...), so any single draw can
be replayed without replaying everything before it.
"""

from __future__ import annotations

import numpy as np

# stream tags
SHUFFLE = 1
DROPOUT = 2
INIT = 3
SYNTH = 4


class KeyedRNG:
    def __init__(self, seed: int):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = int(seed)

    def stream(self, *keys: int) -> np.random.Generator:
        entropy = [self.seed, *(int(k) for k in keys)]
        return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

    def __repr__(self) -> str:
        return f"KeyedRNG(seed={self.seed})"
