"""Seat inventory and the token container that gates purchases.

Two layers hold ticket availability for each train-date:

* the token container, a cache hash ``tokens:<train>:<date>`` with one
  ``<dep>_<arr>_<seat_type>`` counter per segment. A purchase first takes
  tokens from its own segment's counter with one conditional decrement; no
  other counter is touched.
* the seat table, which is authoritative. Each seat row holds a leg bitmask
  and allocation sets the legs of a ticket atomically under the train-date
  lock. Overlapping segments are coupled only here.

Tokens can therefore admit a request that the seats cannot serve (another
segment took the shared legs). The allocator raises :class:`SeatsExhausted`,
counts an alarm and the caller refunds.
"""
from __future__ import annotations

import logging
import re
import threading
import uuid
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from . import segments
from .errors import ContainerNotInitialized, SeatsExhausted
from .kvcache import KVCache
from .recordstore import Mutation, RecordStore
from .segments import SegmentKey

log = logging.getLogger(__name__)

SEAT_TABLE = "t_seat"
TRAIN_TABLE = "t_train"
TRAIN_STATION_TABLE = "t_train_station"

_NAME_OK = re.compile(r"^[^_|:\s]+$")

# seat_id -> leg bitmask
SeatOccupancy = dict


@dataclass(frozen=True)
class Carriage:
    carriage_no: int
    seat_type: str
    seat_count: int


@dataclass(frozen=True)
class SeatSpec:
    seat_id: str
    carriage_no: int
    seat_no: int
    seat_type: str


@dataclass(frozen=True)
class TrainPlan:
    train_id: str
    service_date: str
    stations: tuple[str, ...]
    carriages: tuple[Carriage, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "stations", tuple(self.stations))
        object.__setattr__(self, "carriages", tuple(self.carriages))
        if len(self.stations) < 2:
            raise ValueError("a train needs at least two stations")
        if len(set(self.stations)) != len(self.stations):
            raise ValueError("station names must be unique")
        for name in (*self.stations, self.train_id, *(c.seat_type for c in self.carriages)):
            if not _NAME_OK.match(name):
                raise ValueError(f"name {name!r} may not contain '_', '|', ':' or whitespace")
        if len({c.carriage_no for c in self.carriages}) != len(self.carriages):
            raise ValueError("carriage numbers must be unique")

    @property
    def legs(self) -> int:
        return len(self.stations) - 1

    def seat_id(self, carriage_no: int, seat_no: int) -> str:
        return f"{self.train_id}:{self.service_date}:{carriage_no}:{seat_no}"

    def seats(self) -> list[SeatSpec]:
        out = []
        for c in sorted(self.carriages, key=lambda c: c.carriage_no):
            for n in range(1, c.seat_count + 1):
                out.append(SeatSpec(self.seat_id(c.carriage_no, n), c.carriage_no, n, c.seat_type))
        return out

    def seat_types(self) -> list[str]:
        return sorted({c.seat_type for c in self.carriages})

    def segment_keys(self) -> list[SegmentKey]:
        return [
            SegmentKey(d, a, t)
            for d, a in segments.station_pairs(self.stations)
            for t in self.seat_types()
        ]

    def validate_key(self, key: SegmentKey) -> int:
        """Leg mask of ``key``; raises ``KeyError`` if the train cannot sell it."""
        if key.seat_type not in self.seat_types():
            raise KeyError(f"train {self.train_id} has no {key.seat_type!r} seats")
        return segments.legs_mask(self.stations, key.departure, key.arrival)


@dataclass(frozen=True)
class SeatAssignment:
    seat_id: str
    carriage_no: int
    seat_no: int
    seat_type: str


@dataclass(frozen=True)
class Allocation:
    allocation_id: str
    train_id: str
    service_date: str
    key: SegmentKey
    legs: int
    seats: tuple[SeatAssignment, ...]


@dataclass
class _TrainState:
    plan: TrainPlan
    seats: list[SeatSpec]
    masks: dict[str, int]
    sold: dict[str, int]
    active: dict[str, Allocation] = field(default_factory=dict)
    lock: threading.Lock = field(default_factory=threading.Lock)


def remaining_oracle(plan: TrainPlan, occupancy: SeatOccupancy, key: SegmentKey) -> int:
    """Brute-force count of seats of ``key.seat_type`` whose legs between the
    two stations are all free."""
    stations = list(plan.stations)
    dep, arr = stations.index(key.departure), stations.index(key.arrival)
    count = 0
    for seat in plan.seats():
        if seat.seat_type != key.seat_type:
            continue
        mask = occupancy.get(seat.seat_id, 0)
        leg_taken = [(mask >> leg) & 1 == 1 for leg in range(plan.legs)]
        if not any(leg_taken[dep:arr]):
            count += 1
    return count


class Inventory:
    def __init__(self, store: RecordStore, cache: KVCache):
        self.store = store
        self.cache = cache
        for table in (SEAT_TABLE, TRAIN_TABLE, TRAIN_STATION_TABLE):
            store.create_table(table)
        self._trains: dict[tuple[str, str], _TrainState] = {}
        self._registry_lock = threading.Lock()
        self._metrics_lock = threading.Lock()
        self.token_grants = 0
        self.token_rejections = 0
        self.token_refunds = 0
        self.oversell_alarms = 0

    # setup

    def add_train(self, plan: TrainPlan, occupancy: SeatOccupancy | None = None) -> None:
        """Persist the plan and its seats, then fill the token container."""
        occupancy = dict(occupancy or {})
        seats = plan.seats()
        train_pk = f"{plan.train_id}:{plan.service_date}"
        mutations = [
            Mutation.insert(
                TRAIN_TABLE,
                train_pk,
                {
                    "train_id": plan.train_id,
                    "service_date": plan.service_date,
                    "stations": segments.join_stations(plan.stations),
                },
            )
        ]
        mutations += [
            Mutation.insert(
                TRAIN_STATION_TABLE,
                f"{train_pk}:{i}",
                {"train_id": plan.train_id, "service_date": plan.service_date, "station": s, "seq": i},
            )
            for i, s in enumerate(plan.stations)
        ]
        mutations += [
            Mutation.insert(SEAT_TABLE, s.seat_id, self._seat_columns(plan, s, occupancy.get(s.seat_id, 0), 0))
            for s in seats
        ]
        with self._registry_lock:
            ident = (plan.train_id, plan.service_date)
            if ident in self._trains:
                raise ValueError(f"train {plan.train_id} on {plan.service_date} already registered")
            self.store.commit_with_change(mutations)
            self._trains[ident] = _TrainState(
                plan, seats, {s.seat_id: occupancy.get(s.seat_id, 0) for s in seats}, {s.seat_id: 0 for s in seats}
            )
        self.init_segment_tokens(plan, occupancy)

    def recover(self) -> list[TrainPlan]:
        """Rebuild train state from rows already in the store (log replay).

        Seat masks come back as persisted; token counters are re-derived from
        them. Allocations are re-registered by the order layer via ``adopt``.
        """
        stations: dict[tuple[str, str], list[tuple[int, str]]] = {}
        for row in self.store.rows(TRAIN_STATION_TABLE):
            c = row.columns
            stations.setdefault((c["train_id"], c["service_date"]), []).append((int(c["seq"]), c["station"]))
        seat_rows: dict[tuple[str, str], list[dict]] = {}
        for row in self.store.rows(SEAT_TABLE):
            c = row.columns
            seat_rows.setdefault((c["train_id"], c["service_date"]), []).append(c)
        recovered = []
        for row in self.store.rows(TRAIN_TABLE):
            ident = (row.columns["train_id"], row.columns["service_date"])
            with self._registry_lock:
                if ident in self._trains:
                    continue
            rows = seat_rows.get(ident, [])
            counts: dict[int, list] = {}
            for c in rows:
                entry = counts.setdefault(int(c["carriage_no"]), [c["seat_type"], 0])
                entry[1] = max(entry[1], int(c["seat_no"]))
            plan = TrainPlan(
                ident[0],
                ident[1],
                tuple(s for _, s in sorted(stations.get(ident, []))),
                tuple(Carriage(no, t, n) for no, (t, n) in sorted(counts.items())),
            )
            seats = plan.seats()
            by_id = {plan.seat_id(int(c["carriage_no"]), int(c["seat_no"])): c for c in rows}
            masks = {s.seat_id: int(by_id[s.seat_id]["mask"]) for s in seats}
            sold = {s.seat_id: int(by_id[s.seat_id]["sold_mask"]) for s in seats}
            with self._registry_lock:
                self._trains[ident] = _TrainState(plan, seats, masks, sold)
            self.init_segment_tokens(plan, masks)
            recovered.append(plan)
        return recovered

    @staticmethod
    def _seat_columns(plan: TrainPlan, seat: SeatSpec, mask: int, sold: int) -> dict:
        return {
            "train_id": plan.train_id,
            "service_date": plan.service_date,
            "carriage_no": seat.carriage_no,
            "seat_no": seat.seat_no,
            "seat_type": seat.seat_type,
            "stations": segments.join_stations(plan.stations),
            "mask": mask,
            "sold_mask": sold,
        }

    def plan(self, train_id: str, service_date: str) -> TrainPlan:
        return self._state(train_id, service_date).plan

    def plans(self) -> list[TrainPlan]:
        with self._registry_lock:
            return [s.plan for s in self._trains.values()]

    def _state(self, train_id: str, service_date: str) -> _TrainState:
        try:
            return self._trains[(train_id, service_date)]
        except KeyError:
            raise KeyError(f"no train {train_id} on {service_date}") from None

    def init_segment_tokens(self, plan: TrainPlan, occupancy: SeatOccupancy) -> int:
        seats = plan.seats()
        fields = {}
        for d, a, legs in segments.segment_masks(plan.stations):
            for seat_type in plan.seat_types():
                fields[segments.token_field(d, a, seat_type)] = sum(
                    1 for s in seats if s.seat_type == seat_type and not occupancy.get(s.seat_id, 0) & legs
                )
        key = segments.token_key(plan.train_id, plan.service_date)
        with self.cache.atomic():
            self.cache.delete(key)
            self.cache.hset_many(key, fields)
        return len(fields)

    # token container

    def _token_key(self, train_id: str, service_date: str, key: SegmentKey) -> str:
        self._state(train_id, service_date).plan.validate_key(key)
        tkey = segments.token_key(train_id, service_date)
        if not self.cache.exists(tkey):
            raise ContainerNotInitialized(f"no token container for {train_id} on {service_date}")
        return tkey

    def deduct_tokens(self, train_id: str, service_date: str, key: SegmentKey, count: int) -> bool:
        if count < 1:
            raise ValueError("count must be >= 1")
        tkey = self._token_key(train_id, service_date, key)
        granted = self.cache.hincr_if_at_least(tkey, key.field, 0, -count) is not None
        with self._metrics_lock:
            if granted:
                self.token_grants += 1
            else:
                self.token_rejections += 1
        return granted

    def refund_tokens(self, train_id: str, service_date: str, key: SegmentKey, count: int) -> None:
        tkey = self._token_key(train_id, service_date, key)
        self.cache.hincrby(tkey, key.field, count)
        with self._metrics_lock:
            self.token_refunds += 1

    def tokens(self, train_id: str, service_date: str) -> dict[str, int]:
        return {f: int(v) for f, v in self.cache.hgetall(segments.token_key(train_id, service_date)).items()}

    # seats

    def allocate_seats(
        self,
        train_id: str,
        service_date: str,
        key: SegmentKey,
        count: int,
        preference: Sequence[tuple[int, int]] | None = None,
    ) -> Allocation:
        state = self._state(train_id, service_date)
        plan = state.plan
        legs = plan.validate_key(key)
        with state.lock:
            chosen: list[SeatSpec] = []
            by_pos = {(s.carriage_no, s.seat_no): s for s in state.seats}
            for pos in preference or ():
                seat = by_pos.get(tuple(pos))
                if (
                    seat is not None
                    and seat.seat_type == key.seat_type
                    and not state.masks[seat.seat_id] & legs
                    and seat not in chosen
                ):
                    chosen.append(seat)
                if len(chosen) == count:
                    break
            if len(chosen) < count:
                for seat in state.seats:
                    if seat.seat_type == key.seat_type and not state.masks[seat.seat_id] & legs and seat not in chosen:
                        chosen.append(seat)
                        if len(chosen) == count:
                            break
            if len(chosen) < count:
                with self._metrics_lock:
                    self.oversell_alarms += 1
                log.warning(
                    "tokens granted but seats exhausted: %s %s %s x%d", train_id, service_date, key.field, count
                )
                raise SeatsExhausted(f"{key.field} on {train_id}/{service_date}: need {count} seats")
            self.store.commit_with_change(
                Mutation.update(SEAT_TABLE, s.seat_id, {"mask": state.masks[s.seat_id] | legs}) for s in chosen
            )
            for s in chosen:
                state.masks[s.seat_id] |= legs
            allocation = Allocation(
                allocation_id=uuid.uuid4().hex,
                train_id=train_id,
                service_date=service_date,
                key=key,
                legs=legs,
                seats=tuple(SeatAssignment(s.seat_id, s.carriage_no, s.seat_no, s.seat_type) for s in chosen),
            )
            state.active[allocation.allocation_id] = allocation
            return allocation

    def release_seats(self, allocation: Allocation, refund: bool = True) -> bool:
        """Clear the allocation's legs and refund its tokens.

        Returns ``False`` (and does nothing) if the allocation is not active.
        """
        state = self._state(allocation.train_id, allocation.service_date)
        legs = allocation.legs
        with state.lock:
            if state.active.pop(allocation.allocation_id, None) is None:
                return False
            self.store.commit_with_change(
                Mutation.update(
                    SEAT_TABLE,
                    s.seat_id,
                    {"mask": state.masks[s.seat_id] & ~legs, "sold_mask": state.sold[s.seat_id] & ~legs},
                )
                for s in allocation.seats
            )
            for s in allocation.seats:
                state.masks[s.seat_id] &= ~legs
                state.sold[s.seat_id] &= ~legs
        if refund:
            self.refund_tokens(allocation.train_id, allocation.service_date, allocation.key, len(allocation.seats))
        return True

    def confirm_seats(self, allocation: Allocation) -> bool:
        """Turn the allocation's locked legs into sold legs (payment received)."""
        state = self._state(allocation.train_id, allocation.service_date)
        legs = allocation.legs
        with state.lock:
            if allocation.allocation_id not in state.active:
                return False
            self.store.commit_with_change(
                Mutation.update(SEAT_TABLE, s.seat_id, {"sold_mask": state.sold[s.seat_id] | legs})
                for s in allocation.seats
            )
            for s in allocation.seats:
                state.sold[s.seat_id] |= legs
            return True

    def adopt(self, allocation: Allocation) -> None:
        """Re-register an allocation already reflected in the seat table (recovery)."""
        state = self._state(allocation.train_id, allocation.service_date)
        with state.lock:
            state.active[allocation.allocation_id] = allocation

    def occupancy(self, train_id: str, service_date: str) -> SeatOccupancy:
        state = self._state(train_id, service_date)
        with state.lock:
            return dict(state.masks)

    def sold(self, train_id: str, service_date: str) -> SeatOccupancy:
        state = self._state(train_id, service_date)
        with state.lock:
            return dict(state.sold)

    def active_allocations(self, train_id: str, service_date: str) -> list[Allocation]:
        state = self._state(train_id, service_date)
        with state.lock:
            return list(state.active.values())

    def stored_occupancy(self, train_id: str, service_date: str) -> SeatOccupancy:
        """Leg masks as persisted in the seat table (uncounted read)."""
        return {
            r.primary_key: int(r.columns["mask"])
            for r in self.store.rows(SEAT_TABLE)
            if r.columns["train_id"] == train_id and r.columns["service_date"] == service_date
        }


def overlapping_allocations(allocations: Iterable[Allocation]) -> list[tuple[str, str, str]]:
    """Pairs of allocations that hold a common leg of the same seat.

    Returns ``(seat_id, allocation_id, allocation_id)`` triples; empty means
    no seat is double-booked.
    """
    held: dict[str, list[tuple[int, str]]] = {}
    clashes = []
    for alloc in allocations:
        for seat in alloc.seats:
            for legs, other in held.get(seat.seat_id, []):
                if legs & alloc.legs:
                    clashes.append((seat.seat_id, other, alloc.allocation_id))
            held.setdefault(seat.seat_id, []).append((alloc.legs, alloc.allocation_id))
    return clashes
