"""Seedable randomness with label-derived substreams.

Every random draw in the lab flows through an ``Rng``, which wraps numpy's
PCG64 bit generator. Component streams are derived by hashing a string label
together with the parent seed (SHA-256), so a child stream depends only on
``(seed, label)`` and never on how much of the parent stream was consumed.
Identical seeds therefore reproduce identical streams everywhere.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _derive(seed: int, label: str) -> int:
    payload = seed.to_bytes(16, "little", signed=False) + label.encode("utf-8")
    return int.from_bytes(hashlib.sha256(payload).digest()[:16], "little")


class Rng:
    """Deterministic PCG64 stream, splittable by label."""

    def __init__(self, seed: int):
        if seed < 0:
            raise ValueError("seed must be nonnegative")
        self.seed = int(seed) & ((1 << 128) - 1)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def split(self, label: str) -> "Rng":
        """Child stream fully determined by (self.seed, label)."""
        return Rng(_derive(self.seed, label))

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(shape, dtype=np.float64) * std

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed})"
