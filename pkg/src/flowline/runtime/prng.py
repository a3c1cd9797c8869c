"""SplitMix64, the pseudo-random generator behind shuffles.

The generator state is one unsigned 64-bit integer, so it checkpoints as a
single number, and the output stream is fixed by the algorithm (Steele,
Lea & Flood 2014) rather than by the Python version.
"""

from __future__ import annotations

MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def mix64(z: int) -> int:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & MASK64
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & MASK64
    return z ^ (z >> 31)


def derive_seed(base: int, key: tuple[int, ...] = ()) -> int:
    """Seed for one shuffle instance, from a base seed and its epoch key."""
    h = mix64((base + _GOLDEN) & MASK64)
    for k in key:
        h = mix64((h ^ (k & MASK64)) + _GOLDEN & MASK64)
    return h


class SplitMix64:
    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + _GOLDEN) & MASK64
        return mix64(self.state)

    def below(self, n: int) -> int:
        """Uniform integer in ``[0, n)`` by rejection, free of modulo bias."""
        if n <= 0:
            raise ValueError("n must be positive")
        if n == 1:
            return 0
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            r = self.next_u64()
            if r < limit:
                return r % n
