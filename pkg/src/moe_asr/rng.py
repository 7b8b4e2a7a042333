"""Counter-based random streams.

Draw number ``k`` of stream ``(seed, stream_id)`` comes from a Philox block
whose key is ``(seed, stream_id)`` and whose counter starts at ``k << 128``.
Draws are therefore a pure function of the triple, independent of what any
other stream has consumed.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


def _derive(stream_id: int, name: str) -> int:
    digest = hashlib.blake2b(f"{stream_id}/{name}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass
class RngStream:
    seed: int
    stream_id: int = 0
    counter: int = 0

    def __post_init__(self) -> None:
        self.seed &= _MASK64
        self.stream_id &= _MASK64

    def spawn(self, name: str) -> RngStream:
        """A fresh child stream whose identity depends only on this stream's id and ``name``."""
        return RngStream(self.seed, _derive(self.stream_id, name))

    def _generator(self) -> np.random.Generator:
        bits = np.random.Philox(key=self.seed | (self.stream_id << 64), counter=self.counter << 128)
        self.counter += 1
        return np.random.Generator(bits)

    def random(self, shape=()) -> np.ndarray:
        return self._generator().random(shape)

    def uniform(self, low: float, high: float, shape=()) -> np.ndarray:
        return self._generator().uniform(low, high, shape)

    def normal(self, shape=(), scale: float = 1.0) -> np.ndarray:
        return self._generator().normal(0.0, scale, shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Integers in the closed range [low, high]."""
        return self._generator().integers(low, high, shape, endpoint=True)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator().permutation(n)

    def choice(self, n: int, size: int, p: np.ndarray | None = None) -> np.ndarray:
        return self._generator().choice(n, size=size, p=p)

    def state(self) -> dict:
        return {"seed": self.seed, "stream_id": self.stream_id, "counter": self.counter}

    @classmethod
    def from_state(cls, state: dict) -> RngStream:
        return cls(int(state["seed"]), int(state["stream_id"]), int(state["counter"]))
