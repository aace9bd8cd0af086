"""Bit-array Bloom filter sized from a target false-positive rate."""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass

import mmh3

_LN2 = math.log(2)


@dataclass(frozen=True)
class BloomParams:
    n: int
    p: float
    m: int
    k: int


def size_for(n: int, p: float) -> BloomParams:
    """Smallest bit count ``m`` for ``n`` elements at false-positive rate ``p``,
    and the hash count ``k`` that minimises the rate for that ``m``."""
    if n < 1:
        raise ValueError(f"expected element count must be >= 1, got {n}")
    if not 0.0 < p < 1.0:
        raise ValueError(f"false-positive rate must lie in (0, 1), got {p}")
    m = max(1, math.ceil(-n * math.log(p) / (_LN2 * _LN2)))
    k = max(1, math.floor(m / n * _LN2 + 0.5))
    return BloomParams(n=n, p=p, m=m, k=k)


def predicted_fpr(m: int, k: int, n: int) -> float:
    if m < 1 or k < 1 or n < 0:
        raise ValueError("need m >= 1, k >= 1, n >= 0")
    return (1.0 - math.exp(-k * n / m)) ** k


def _as_bytes(key: bytes | str) -> bytes:
    return key.encode("utf-8") if isinstance(key, str) else key


class BloomFilter:
    """Insert/query-only Bloom filter.

    Positions come from double hashing ``h1 + i*h2 (mod m)`` over the two
    64-bit halves of MurmurHash3-x64-128.
    """

    def __init__(self, params: BloomParams) -> None:
        self.params = params
        self._bits = bytearray((params.m + 7) // 8)
        self._lock = threading.Lock()
        self.count = 0

    @classmethod
    def for_capacity(cls, n: int, p: float) -> "BloomFilter":
        return cls(size_for(n, p))

    def positions(self, key: bytes | str) -> list[int]:
        digest = mmh3.hash128(_as_bytes(key), 0, True, signed=False)
        h1 = digest & 0xFFFF_FFFF_FFFF_FFFF
        h2 = digest >> 64
        m = self.params.m
        return [(h1 + i * h2) % m for i in range(self.params.k)]

    def insert(self, key: bytes | str) -> None:
        positions = self.positions(key)
        bits = self._bits
        with self._lock:
            for pos in positions:
                bits[pos >> 3] |= 1 << (pos & 7)
            self.count += 1

    def maybe_contains(self, key: bytes | str) -> bool:
        bits = self._bits
        for pos in self.positions(key):
            if not bits[pos >> 3] & (1 << (pos & 7)):
                return False
        return True

    __contains__ = maybe_contains

    def popcount(self) -> int:
        return sum(bin(b).count("1") for b in self._bits)

    def snapshot(self) -> bytes:
        return bytes(self._bits)
