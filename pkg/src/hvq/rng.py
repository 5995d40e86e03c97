"""Seeded xorshift64* generator.

Every random choice in the package (k-means++ seeding, restarts) draws from
this generator so results do not depend on numpy's bit generators. The
algorithm is small enough to port:

    state  <- splitmix64(seed)            (0 is replaced by 0x9E3779B97F4A7C15)
    next:  x ^= x >> 12; x ^= x << 25; x ^= x >> 27   (64-bit wraparound)
           output = x * 0x2545F4914F6CDD1D mod 2**64
    uniform float in [0, 1) = (output >> 11) * 2**-53

Independent streams are derived with ``derive(seed, *keys)``, which folds the
keys into the seed through splitmix64.
"""

from __future__ import annotations

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    x = (x + _GOLDEN) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


class XorShift64Star:
    def __init__(self, seed: int = 0):
        state = splitmix64(seed & _MASK)
        self.state = state or _GOLDEN

    @classmethod
    def derive(cls, seed: int, *keys: int) -> "XorShift64Star":
        """Generator for the sub-stream identified by ``keys`` under ``seed``."""
        h = seed & _MASK
        for key in keys:
            h = splitmix64(h ^ (key & _MASK))
        return cls(h)

    def next_u64(self) -> int:
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & _MASK
        x ^= x >> 27
        self.state = x
        return (x * 0x2545F4914F6CDD1D) & _MASK

    def random(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def randbelow(self, n: int) -> int:
        """Uniform integer in [0, n), by rejection so there is no modulo bias."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            v = self.next_u64()
            if v < limit:
                return v % n
