"""Counter-based random streams on top of numpy's Philox generator."""

from __future__ import annotations

from typing import List, Sequence

import numpy as np

from .tensor import Tensor

_MASK64 = (1 << 64) - 1


class RngStream:
    """Reproducible random stream addressed by ``(seed, counter)``.

    ``counter`` is the Philox block counter, so ``RngStream(seed, c)`` replays
    the sequence a stream produced once its counter reached ``c`` (at block
    boundaries). Child streams from :meth:`split` get their own Philox keys.
    """

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self._bitgen = np.random.Philox(key=self.seed, counter=int(counter) & _MASK64)
        self._gen = np.random.Generator(self._bitgen)
        self._n_splits = 0

    @property
    def counter(self) -> int:
        return int(self._bitgen.state["state"]["counter"][0])

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def split(self, n: int = 2) -> List["RngStream"]:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self._n_splits,))
        self._n_splits += 1
        return [RngStream(int(c.generate_state(1, np.uint64)[0])) for c in ss.spawn(n)]

    def normal(self, shape: Sequence[int]) -> np.ndarray:
        return self._gen.standard_normal(tuple(shape))

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, counter={self.counter})"


def sample_gaussian(stream: RngStream, shape: Sequence[int]) -> Tensor:
    return Tensor(stream.normal(shape))
