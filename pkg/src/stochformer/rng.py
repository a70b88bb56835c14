"""Counter-based, splittable random streams.

Every stream is the triple ``(seed, stream, counter)``. Each draw call builds a
Philox-4x64 generator keyed by ``(seed, stream)`` with the call counter placed in
the top counter word, so the values produced by a call depend only on that
triple and never on how many numbers earlier calls consumed.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

ALGORITHM = "philox4x64-10"
_MASK64 = (1 << 64) - 1


def _derive(stream: int, label: str) -> int:
    digest = hashlib.blake2b(f"{stream}/{label}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass
class RngStream:
    seed: int
    stream: int = 0
    counter: int = 0

    algorithm = ALGORITHM

    def __post_init__(self):
        self.seed = int(self.seed) & _MASK64
        self.stream = int(self.stream) & _MASK64

    def fork(self, label) -> "RngStream":
        """Child stream named by ``label``; pure, the parent is left untouched."""
        return RngStream(self.seed, _derive(self.stream, str(label)), 0)

    def copy(self) -> "RngStream":
        return RngStream(self.seed, self.stream, self.counter)

    def _generator(self) -> np.random.Generator:
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        ctr = np.array([0, 0, 0, self.counter & _MASK64], dtype=np.uint64)
        self.counter += 1
        return np.random.Generator(np.random.Philox(key=key, counter=ctr))

    def uniform(self, shape=()) -> np.ndarray | float:
        return self._generator().random(shape)

    def normal(self, shape=()) -> np.ndarray | float:
        return self._generator().standard_normal(shape)

    def bernoulli(self, p: float, shape=()):
        return self.uniform(shape) < p

    def permutation(self, n: int) -> np.ndarray:
        return self._generator().permutation(n)

    def integers(self, low: int, high: int, shape=()):
        return self._generator().integers(low, high, shape)
