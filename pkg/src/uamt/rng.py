"""Counter-based random number streams.

Every stochastic component in the package draws from an explicit
:class:`RngStream`.  Streams are cheap value objects: the same
(seed, stream_id, counter) triple always produces the same draws, and
distinct stream ids give statistically independent sequences.  This is
what makes whole pipeline runs bit-reproducible and lets independent
forward passes (e.g. the Monte-Carlo dropout passes) run in any order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    """One splitmix64 step; used to derive child stream ids."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


@dataclass(frozen=True)
class RngStream:
    """A named position in a Philox counter-based random sequence."""

    seed: int
    stream_id: int = 0
    counter: int = 0

    def __post_init__(self):
        for field in ("seed", "stream_id", "counter"):
            v = getattr(self, field)
            if not 0 <= int(v) <= _MASK64:
                raise ValueError(f"{field} must fit in 64 bits, got {v}")

    def child(self, key: int) -> "RngStream":
        """Derive an independent substream; `key` may be any 64-bit int."""
        mixed = _splitmix64(self.stream_id ^ _splitmix64(key & _MASK64))
        return RngStream(self.seed, mixed, 0)

    def advanced(self, steps: int) -> "RngStream":
        return RngStream(self.seed, self.stream_id, self.counter + steps)

    def generator(self) -> np.random.Generator:
        """Fresh numpy Generator positioned at this stream's counter."""
        bitgen = np.random.Philox(key=[self.seed, self.stream_id])
        if self.counter:
            bitgen = bitgen.advance(self.counter)
        return np.random.Generator(bitgen)
