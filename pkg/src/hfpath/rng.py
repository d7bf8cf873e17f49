"""Counter-based seed streams.

Every random draw in the package comes from a Philox generator whose key is
derived from ``(master seed, *key, channel)``. Replications keyed this way
are reproducible no matter how they are scheduled across workers.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# shock channels
CH_W = 0
CH_V = 1
CH_JUMPS = 2
CH_BRIDGE = 3
CH_VOL_JUMPS = 4
CH_LIMIT = 5
CH_AUX = 6

DEFAULT_SEED = 2718281828


@dataclass(frozen=True)
class SeedStream:
    seed: int = DEFAULT_SEED
    key: tuple[int, ...] = ()

    def __post_init__(self):
        if self.seed < 0 or self.seed >= 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def child(self, *key: int) -> SeedStream:
        return SeedStream(self.seed, self.key + tuple(int(k) for k in key))

    def generator(self, channel: int = 0) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=self.key + (int(channel),))
        return np.random.Generator(np.random.Philox(ss))

    def label(self) -> str:
        return "/".join(str(k) for k in (self.seed,) + self.key)


def as_stream(seed) -> SeedStream:
    if isinstance(seed, SeedStream):
        return seed
    if seed is None:
        return SeedStream()
    return SeedStream(int(seed))
