"""Counter-addressed random streams.

Every stochastic operation in the package draws from an :class:`RngStream`.
A stream is a pure function of ``(seed, counter)``: draw number ``i`` always
yields the same bits no matter what earlier draws consumed, because each draw
jumps a Philox bit generator to its own counter slot.  Child streams are
derived from a parent seed and a string label, so adding parameters or
components to a model never perturbs the draws of unrelated components.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from numpy.random import Generator, Philox

# Philox-block stride between draw slots: 2**64 blocks = 2**66 uint64 values
# per slot, far beyond any single draw in this package.
_SLOT_STRIDE = 1 << 64


def derive_seed(seed: int, label: str) -> int:
    """Stable 64-bit seed derived from a parent seed and a label."""
    digest = hashlib.sha256(f"{seed}|{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class RngStream:
    """Deterministic, replayable source of random arrays.

    Replaying a stream means constructing a new one with the same ``seed``:
    the draw sequence is then reproduced bit for bit.
    """

    seed: int
    counter: int = 0

    def _next(self) -> Generator:
        bg = Philox(key=self.seed % (1 << 128),
                    counter=(self.counter % (1 << 190)) * _SLOT_STRIDE)
        self.counter += 1
        return Generator(bg)

    def uniform(self, shape=()) -> np.ndarray:
        """Uniform [0, 1) doubles."""
        return self._next().random(shape)

    def normal(self, shape=()) -> np.ndarray:
        """Standard normal doubles."""
        return self._next().standard_normal(shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Integers in [low, high)."""
        return self._next().integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._next().permutation(n)

    def child(self, label: str) -> "RngStream":
        """Independent stream addressed by ``label``.

        Children depend only on (seed, label), not on how much the parent
        has drawn.
        """
        return RngStream(derive_seed(self.seed, label))

    def replay(self) -> "RngStream":
        """Fresh stream with the same seed, counter reset to zero."""
        return RngStream(self.seed)
