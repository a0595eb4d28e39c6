"""Seeded, forkable random streams.

All randomness in the package is drawn from :class:`Rng`. A stream is named by
its root seed and the path of fork labels leading to it, and is backed by
numpy's PCG64 seeded through ``SeedSequence``, which is platform independent.
"""
from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


class Rng:
    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed) & _MASK64
        self.path = tuple(int(p) & _MASK64 for p in path)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.PCG64(seq))

    @property
    def stream_id(self) -> tuple[int, ...]:
        return self.path

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def fork(self, label: int) -> "Rng":
        """Child stream determined only by (seed, path, label), not by draws made so far."""
        return Rng(self.seed, self.path + (label,))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path})"

    # draws ------------------------------------------------------------
    def random(self, size=None):
        return self._gen.random(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def gumbel(self, size=None):
        return self._gen.gumbel(0.0, 1.0, size)

    # persistence ------------------------------------------------------
    def state(self) -> dict:
        return {"seed": self.seed, "path": list(self.path), "bit_generator": self._gen.bit_generator.state}

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        rng = cls(state["seed"], tuple(state["path"]))
        rng._gen.bit_generator.state = state["bit_generator"]
        return rng


def fork(parent: Rng, label: int) -> Rng:
    return parent.fork(label)
