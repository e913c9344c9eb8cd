"""Counter-keyed random streams.

A stream is a base seed plus a path of non-negative integers. Splitting
appends to the path, so the draws for (step 7, record 3, position 12) never
depend on how many draws other tokens made or in which order they ran.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Top-level stream purposes.
SAMPLING = 0
NOISE = 1
INIT = 2


@dataclass(frozen=True)
class RngStream:
    seed: int
    path: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.seed < 0 or any(k < 0 for k in self.path):
            raise ValueError("seed and stream keys must be non-negative integers")

    def split(self, *keys: int) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(int(k) for k in keys))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        return np.random.Generator(np.random.Philox(ss))

    def normal(self, size: int) -> np.ndarray:
        return self.generator().standard_normal(size)
