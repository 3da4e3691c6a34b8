"""Portable seeded randomness.

Splits must be reproducible from the seed alone, independent of numpy's
generator internals, so shuffling uses SplitMix64:

    state  <- state + 0x9E3779B97F4A7C15          (mod 2**64)
    z      <- state
    z      <- (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 (mod 2**64)
    z      <- (z ^ (z >> 27)) * 0x94D049BB133111EB (mod 2**64)
    output <- z ^ (z >> 31)

Bounded draws in [0, m) reject outputs >= 2**64 - (2**64 mod m) and return
``output mod m``. The Fisher-Yates shuffle walks i = n-1 .. 1 and swaps
position i with a bounded draw in [0, i].

Everything else (training, sampling) uses numpy ``Generator`` objects whose
seeds are derived from the run seed with :func:`derive_seed`.
"""
from __future__ import annotations

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def bounded(self, m: int) -> int:
        if m <= 0:
            raise ValueError("bound must be positive")
        limit = (1 << 64) - ((1 << 64) % m)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % m

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.bounded(i + 1)
            items[i], items[j] = items[j], items[i]

    def permutation(self, n: int) -> list[int]:
        order = list(range(n))
        self.shuffle(order)
        return order


def derive_seed(seed: int, *labels) -> int:
    """Deterministic 64-bit child seed from a parent seed and labels."""
    text = ":".join([str(seed & MASK64)] + [str(x) for x in labels])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def make_rng(seed: int, *labels) -> np.random.Generator:
    if labels:
        seed = derive_seed(seed, *labels)
    return np.random.default_rng(seed & MASK64)
