"""Station-segment helpers and cache key naming shared by inventory and CDC.

Leg ``i`` of a train is the run between station ``i`` and station ``i+1``.
A seat's occupancy is an integer bitmask over legs; a ticket from station
``d`` to station ``a`` covers legs ``d .. a-1``.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Iterable, Sequence


@dataclass(frozen=True)
class SegmentKey:
    departure: str
    arrival: str
    seat_type: str

    @property
    def field(self) -> str:
        return token_field(self.departure, self.arrival, self.seat_type)

    @classmethod
    def parse(cls, field: str) -> "SegmentKey":
        dep, arr, seat_type = field.split("_", 2)
        return cls(dep, arr, seat_type)


def token_field(departure: str, arrival: str, seat_type: str) -> str:
    return f"{departure}_{arrival}_{seat_type}"


def token_key(train_id: str, service_date: str) -> str:
    return f"tokens:{train_id}:{service_date}"


def remaining_key(train_id: str, service_date: str) -> str:
    return f"remaining:{train_id}:{service_date}"


def seat_mirror_key(train_id: str, service_date: str) -> str:
    return f"seatmask:{train_id}:{service_date}"


def route_bloom_key(service_date: str, departure: str, arrival: str) -> str:
    return f"{service_date}:{departure}:{arrival}"


def route_cache_key(service_date: str, departure: str, arrival: str) -> str:
    return f"route:{service_date}:{departure}:{arrival}"


def leg_span(stations: Sequence[str], departure: str, arrival: str) -> tuple[int, int]:
    try:
        d, a = stations.index(departure), stations.index(arrival)
    except ValueError:
        raise KeyError(f"{departure}->{arrival} is not on this train") from None
    if d >= a:
        raise KeyError(f"{departure} does not precede {arrival}")
    return d, a


def legs_mask(stations: Sequence[str], departure: str, arrival: str) -> int:
    d, a = leg_span(stations, departure, arrival)
    return ((1 << (a - d)) - 1) << d


def station_pairs(stations: Sequence[str]) -> list[tuple[str, str]]:
    return list(combinations(stations, 2))


def segment_masks(stations: Sequence[str]) -> list[tuple[str, str, int]]:
    return [(d, a, legs_mask(stations, d, a)) for d, a in station_pairs(stations)]


def remaining_counts(
    stations: Sequence[str], seats: Iterable[tuple[str, int]]
) -> dict[str, int]:
    """Remaining-ticket counts per token field, from ``(seat_type, mask)`` pairs."""
    seats = list(seats)
    seat_types = sorted({t for t, _ in seats})
    counts = {}
    for d, a, legs in segment_masks(stations):
        for seat_type in seat_types:
            counts[token_field(d, a, seat_type)] = sum(
                1 for t, mask in seats if t == seat_type and not mask & legs
            )
    return counts


def join_stations(stations: Sequence[str]) -> str:
    return "|".join(stations)


def split_stations(text: str) -> list[str]:
    return text.split("|")
