"""Counter-based random streams.

Every draw rebuilds a Philox generator from (seed, counter), so a stream's
output is a pure function of those two integers: replaying a run, or handing
out substreams by index, cannot depend on call order elsewhere in the
program.
"""

from __future__ import annotations

import hashlib

import numpy as np

# Each draw occupies its own 2**64-block window of the Philox counter, so a
# single call can consume up to ~2**66 doubles without touching the next slot.
_SLOT_BITS = 64


def _derive_key(seed: int, label: str) -> int:
    h = hashlib.blake2b(f"{seed}/{label}".encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


class RngStream:
    """Deterministic stream of draws keyed by (seed, counter)."""

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & (2**64 - 1)
        self.counter = int(counter)

    def _next(self) -> np.random.Generator:
        bg = np.random.Philox(key=self.seed)
        bg.advance(self.counter << _SLOT_BITS)
        self.counter += 1
        return np.random.Generator(bg)

    def normal(self, shape=()) -> np.ndarray:
        return self._next().standard_normal(shape)

    def uniform(self, shape=()) -> np.ndarray:
        return self._next().random(shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._next().integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._next().permutation(n)

    def child(self, label: str) -> "RngStream":
        """Independent stream derived from this stream's seed and a label.

        Derivation uses only the seed, never the counter, so the same label
        always yields the same child regardless of how much the parent has
        already drawn.
        """
        return RngStream(_derive_key(self.seed, label))

    def substream(self, index: int) -> "RngStream":
        """Indexed substream for order-free parallel sampling."""
        return self.child(f"sub{index}")

    def __repr__(self):
        return f"RngStream(seed={self.seed}, counter={self.counter})"
