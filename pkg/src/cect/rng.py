"""Seeded, splittable random streams.

Every stream is a PCG64 generator keyed by a ``SeedSequence`` built from the
run seed plus a path of names, so child streams are independent of the order
in which they are requested and identical on every platform.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _name_key(name: str | int) -> int:
    if isinstance(name, int):
        if name < 0:
            raise ValueError(f"stream key must be non-negative, got {name}")
        return name
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")


class Rng:
    """Named PCG64 stream; ``child("a", 3)`` derives a sub-stream."""

    algorithm = "PCG64"

    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        if seed < 0:
            raise ValueError(f"seed must be non-negative, got {seed}")
        self.seed = int(seed)
        self.key = tuple(key)
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=self.key))
        )

    def child(self, *names: str | int) -> "Rng":
        return Rng(self.seed, self.key + tuple(_name_key(n) for n in names))

    def uniform(self, low=0.0, high=1.0, size=None, dtype=np.float64):
        out = self._gen.uniform(low, high, size)
        return out if size is None else out.astype(dtype, copy=False)

    def normal(self, loc=0.0, scale=1.0, size=None, dtype=np.float64):
        out = self._gen.normal(loc, scale, size)
        return out if size is None else out.astype(dtype, copy=False)

    def random(self, size=None) -> np.ndarray | float:
        return self._gen.random(size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, key={self.key})"
