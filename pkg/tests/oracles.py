"""Independent reference implementations used to cross-check the package.

None of these import the code under test's algorithms; they recompute the
same quantities a different way (bit strings instead of shifts, explicit
per-leg seat maps instead of bitmasks, mpmath instead of float math, a
third-party AES).
"""
from __future__ import annotations

import itertools
from collections.abc import Iterable, Sequence

import mpmath
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes


def snowflake_bits(ts: int, dc: int, worker: int, seq: int, widths: Sequence[int]) -> int:
    """Compose by concatenating zero-padded binary strings (sign bit first)."""
    fields = (ts, dc, worker, seq)
    text = "0" + "".join(format(v, f"0{w}b") if w else "" for v, w in zip(fields, widths))
    assert len(text) == 64
    return int(text, 2)


def bloom_size(n: int, p: str | float) -> tuple[int, int]:
    with mpmath.workdps(50):
        p = mpmath.mpf(p)
        ln2 = mpmath.log(2)
        m = int(mpmath.ceil(-n * mpmath.log(p) / ln2**2))
        m = max(m, 1)
        k = max(1, int(mpmath.floor(mpmath.mpf(m) / n * ln2 + mpmath.mpf("0.5"))))
        return m, k


def bloom_fpr(m: int, k: int, n: int) -> float:
    with mpmath.workdps(50):
        return float((1 - mpmath.exp(-mpmath.mpf(k) * n / m)) ** k)


def aes_ecb_encrypt(key: bytes, data: bytes) -> bytes:
    enc = Cipher(algorithms.AES(key), modes.ECB()).encryptor()
    return enc.update(data) + enc.finalize()


def aes_ecb_decrypt(key: bytes, data: bytes) -> bytes:
    dec = Cipher(algorithms.AES(key), modes.ECB()).decryptor()
    return dec.update(data) + dec.finalize()


def fnv1a_64(data: bytes) -> int:
    h = 14695981039346656037
    for byte in data:
        h = ((h ^ byte) * 1099511628211) % 2**64
    return h


class SeatMap:
    """Explicit seat -> set-of-leg-indices model of one train-date."""

    def __init__(self, stations: Sequence[str], seats: dict[str, str]):
        self.stations = list(stations)
        self.seat_type = dict(seats)  # seat_id -> seat_type
        self.taken: dict[str, set[int]] = {s: set() for s in seats}

    def legs(self, dep: str, arr: str) -> set[int]:
        return set(range(self.stations.index(dep), self.stations.index(arr)))

    def remaining(self, dep: str, arr: str, seat_type: str) -> int:
        want = self.legs(dep, arr)
        return sum(1 for s, t in self.seat_type.items() if t == seat_type and not (self.taken[s] & want))

    def all_remaining(self) -> dict[str, int]:
        out = {}
        types = sorted(set(self.seat_type.values()))
        for i, j in itertools.combinations(range(len(self.stations)), 2):
            for t in types:
                out[f"{self.stations[i]}_{self.stations[j]}_{t}"] = self.remaining(self.stations[i], self.stations[j], t)
        return out

    def occupy(self, seat_id: str, dep: str, arr: str) -> None:
        legs = self.legs(dep, arr)
        assert not self.taken[seat_id] & legs, f"double booking of {seat_id}"
        self.taken[seat_id] |= legs

    def free(self, seat_id: str, dep: str, arr: str) -> None:
        self.taken[seat_id] -= self.legs(dep, arr)

    @classmethod
    def from_masks(cls, stations: Sequence[str], seats: dict[str, str], masks: dict[str, int]) -> "SeatMap":
        model = cls(stations, seats)
        for seat, mask in masks.items():
            model.taken[seat] = {i for i in range(len(stations) - 1) if mask >> i & 1}
        return model


def nearest_rank(values: Iterable[float], p: float) -> float:
    """Nearest-rank by scanning the sorted list with an explicit cumulative count."""
    ordered = sorted(values)
    n = len(ordered)
    for i, v in enumerate(ordered, start=1):
        if i * 100 >= p * n:
            return v
    return ordered[-1]
