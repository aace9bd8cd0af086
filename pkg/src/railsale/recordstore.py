"""Transactional in-process record store with a row-level change log, plus the
change-data-capture pump and the cache applier that keeps the cache in step.

Every committed mutation appends one :class:`ChangeEvent` to the log, in
commit order. Images are full column maps with two bookkeeping entries:
``_pk`` (primary key) and ``_version`` (the row version after the mutation
that produced the image). A DELETE carries only its before-image; its own
version is ``before._version + 1``.

Wire format of a change message (one JSON object, also one line of the
change-log file)::

    {"seq": int, "table": str, "op": "INSERT|UPDATE|DELETE",
     "before": obj|null, "after": obj|null, "ts": int-ms}
"""
from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable

from . import segments
from .errors import CommitRejected, PoisonMessage
from .kvcache import KVCache
from .mqbus import BusMessage, MessageBus

log = logging.getLogger(__name__)

OPS = ("INSERT", "UPDATE", "DELETE")
DEAD_LETTER_TOPIC = "cdc.dead"
VERSION_HASH = "cdc:version"

_SHARD_SUFFIX = re.compile(r"_\d+_\d+$")


def logical_table(table: str) -> str:
    """``t_user_1_3`` -> ``t_user``; unsharded names pass through."""
    return _SHARD_SUFFIX.sub("", table)


def wall_ms() -> int:
    return time.time_ns() // 1_000_000


@dataclass
class TableRow:
    table: str
    primary_key: str
    columns: dict
    version: int

    def image(self) -> dict:
        return {**self.columns, "_pk": self.primary_key, "_version": self.version}


@dataclass(frozen=True)
class Mutation:
    op: str
    table: str
    key: str
    columns: dict | None = None

    @classmethod
    def insert(cls, table: str, key: str, columns: dict) -> "Mutation":
        return cls("INSERT", table, key, dict(columns))

    @classmethod
    def update(cls, table: str, key: str, columns: dict) -> "Mutation":
        return cls("UPDATE", table, key, dict(columns))

    @classmethod
    def delete(cls, table: str, key: str) -> "Mutation":
        return cls("DELETE", table, key)


@dataclass(frozen=True)
class ChangeEvent:
    sequence: int
    table: str
    op: str
    before: dict | None
    after: dict | None
    commit_time: int

    @property
    def primary_key(self) -> str:
        return (self.after or self.before)["_pk"]

    @property
    def version(self) -> int:
        if self.after is not None:
            return self.after["_version"]
        return self.before["_version"] + 1

    def to_json(self) -> str:
        return json.dumps(
            {
                "seq": self.sequence,
                "table": self.table,
                "op": self.op,
                "before": self.before,
                "after": self.after,
                "ts": self.commit_time,
            },
            separators=(",", ":"),
            ensure_ascii=False,
        )

    @classmethod
    def from_json(cls, text: str) -> "ChangeEvent":
        try:
            obj = json.loads(text)
            event = cls(
                sequence=int(obj["seq"]),
                table=str(obj["table"]),
                op=obj["op"],
                before=obj["before"],
                after=obj["after"],
                commit_time=int(obj["ts"]),
            )
        except (ValueError, KeyError, TypeError) as exc:
            raise PoisonMessage(f"malformed change message: {exc}") from None
        if event.op not in OPS:
            raise PoisonMessage(f"unknown op {event.op!r}")
        for name, image in (("before", event.before), ("after", event.after)):
            if image is not None and (
                not isinstance(image, dict) or "_pk" not in image or "_version" not in image
            ):
                raise PoisonMessage(f"{name} image lacks _pk/_version")
        shape = (event.before is not None, event.after is not None)
        if shape != {"INSERT": (False, True), "UPDATE": (True, True), "DELETE": (True, False)}[event.op]:
            raise PoisonMessage(f"{event.op} event with images {shape}")
        return event


class RecordStore:
    """Tables of versioned rows keyed by primary key.

    ``get``/``scan``/``lookup`` count as persistent-store reads (see
    ``reads``); ``rows`` is an uncounted view for verification and recovery.
    """

    def __init__(self, log_path: str | os.PathLike | None = None, clock: Callable[[], int] = wall_ms):
        self._tables: dict[str, dict[str, TableRow]] = {}
        self._versions: dict[tuple[str, str], int] = {}
        self._indexes: dict[tuple[str, str], dict[object, set[str]]] = {}
        self._log: list[ChangeEvent] = []
        self._lock = threading.RLock()
        self._appended = threading.Condition(self._lock)
        self._clock = clock
        self.reads = 0
        self._log_file = None
        if log_path is not None:
            self._recover(log_path)
            self._log_file = open(log_path, "a", encoding="utf-8")

    # schema

    def create_table(self, name: str) -> None:
        with self._lock:
            self._tables.setdefault(name, {})

    def create_index(self, table: str, column: str) -> None:
        with self._lock:
            index: dict[object, set[str]] = {}
            for row in self._tables[table].values():
                index.setdefault(row.columns.get(column), set()).add(row.primary_key)
            self._indexes[(table, column)] = index

    def tables(self) -> list[str]:
        with self._lock:
            return sorted(self._tables)

    # writes

    def commit_with_change(self, mutations: Iterable[Mutation]) -> list[ChangeEvent]:
        mutations = list(mutations)
        with self._lock:
            staged: dict[tuple[str, str], TableRow | None] = {}

            def current(table: str, key: str) -> TableRow | None:
                if (table, key) in staged:
                    return staged[(table, key)]
                return self._tables[table].get(key)

            pending: list[tuple[Mutation, TableRow | None, TableRow | None]] = []
            staged_versions: dict[tuple[str, str], int] = {}
            for m in mutations:
                if m.table not in self._tables:
                    raise CommitRejected(f"unknown table {m.table!r}")
                if m.op not in OPS:
                    raise CommitRejected(f"unknown op {m.op!r}")
                before = current(m.table, m.key)
                ident = (m.table, m.key)
                version = staged_versions.get(ident, self._versions.get(ident, 0)) + 1
                staged_versions[ident] = version
                if m.op == "INSERT":
                    if before is not None:
                        raise CommitRejected(f"{m.table}/{m.key} already exists")
                    after = TableRow(m.table, m.key, dict(m.columns or {}), version)
                elif before is None:
                    raise CommitRejected(f"{m.table}/{m.key} does not exist")
                elif m.op == "UPDATE":
                    after = TableRow(m.table, m.key, {**before.columns, **(m.columns or {})}, version)
                else:
                    after = None
                staged[ident] = after
                pending.append((m, before, after))

            now = self._clock()
            events = []
            for m, before, after in pending:
                self._apply_row(m.table, m.key, before, after)
                self._versions[(m.table, m.key)] = (
                    after.version if after is not None else before.version + 1
                )
                event = ChangeEvent(
                    sequence=len(self._log),
                    table=m.table,
                    op=m.op,
                    before=before.image() if before is not None else None,
                    after=after.image() if after is not None else None,
                    commit_time=now,
                )
                self._log.append(event)
                events.append(event)
            if self._log_file is not None:
                self._log_file.write("".join(e.to_json() + "\n" for e in events))
                self._log_file.flush()
            self._appended.notify_all()
            return events

    def _apply_row(self, table: str, key: str, before: TableRow | None, after: TableRow | None) -> None:
        rows = self._tables[table]
        for (t, column), index in self._indexes.items():
            if t != table:
                continue
            if before is not None:
                bucket = index.get(before.columns.get(column))
                if bucket is not None:
                    bucket.discard(key)
            if after is not None:
                index.setdefault(after.columns.get(column), set()).add(key)
        if after is None:
            rows.pop(key, None)
        else:
            rows[key] = after

    def _recover(self, path: str | os.PathLike) -> None:
        if not os.path.exists(path):
            return
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                event = ChangeEvent.from_json(line)
                rows = self._tables.setdefault(event.table, {})
                key = event.primary_key
                if event.after is None:
                    rows.pop(key, None)
                else:
                    cols = {k: v for k, v in event.after.items() if k not in ("_pk", "_version")}
                    rows[key] = TableRow(event.table, key, cols, event.after["_version"])
                self._versions[(event.table, key)] = event.version
                self._log.append(event)

    def close(self) -> None:
        with self._lock:
            if self._log_file is not None:
                self._log_file.close()
                self._log_file = None

    # reads

    def get(self, table: str, key: str) -> TableRow | None:
        with self._lock:
            self.reads += 1
            return self._tables[table].get(key)

    def scan(self, table: str, predicate: Callable[[dict], bool] | None = None) -> list[TableRow]:
        with self._lock:
            self.reads += 1
            rows = self._tables[table].values()
            return [r for r in rows if predicate is None or predicate(r.columns)]

    def lookup(self, table: str, column: str, value) -> list[TableRow]:
        with self._lock:
            self.reads += 1
            keys = self._indexes[(table, column)].get(value, ())
            rows = self._tables[table]
            return [rows[k] for k in sorted(keys)]

    def rows(self, table: str) -> list[TableRow]:
        with self._lock:
            return list(self._tables[table].values())

    def version_of(self, table: str, key: str) -> int:
        with self._lock:
            return self._versions.get((table, key), 0)

    # change log

    @property
    def log(self) -> list[ChangeEvent]:
        with self._lock:
            return list(self._log)

    def log_length(self) -> int:
        with self._lock:
            return len(self._log)

    def events_from(self, position: int) -> list[ChangeEvent]:
        with self._lock:
            return self._log[position:]

    def wait_for_events(self, position: int, timeout_s: float) -> bool:
        with self._appended:
            return self._appended.wait_for(lambda: len(self._log) > position, timeout=timeout_s)


class CdcPump:
    """Reads the change log from a tracked position and publishes the events
    whose table passes the filter to topic ``cdc.<table>``.

    Filter entries match either a physical table name or its logical name.
    """

    def __init__(self, store: RecordStore, bus: MessageBus, tables: Iterable[str]):
        self.store = store
        self.bus = bus
        self.tables = frozenset(tables)
        self.position = 0
        self._lock = threading.Lock()
        self._thread: threading.Thread | None = None
        self._stop = threading.Event()

    def accepts(self, table: str) -> bool:
        return table in self.tables or logical_table(table) in self.tables

    def pump_changes(self) -> int:
        with self._lock:
            events = self.store.events_from(self.position)
            published = 0
            for event in events:
                if self.accepts(event.table):
                    self.bus.publish(f"cdc.{event.table}", event.to_json())
                    published += 1
            self.position += len(events)
            return published

    def drained(self) -> bool:
        return self.position >= self.store.log_length()

    def start(self) -> None:
        self._stop.clear()
        self._thread = threading.Thread(target=self._run, name="cdc-pump", daemon=True)
        self._thread.start()

    def _run(self) -> None:
        while not self._stop.is_set():
            if self.store.wait_for_events(self.position, timeout_s=0.05):
                self.pump_changes()

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
            self._thread = None
        self.pump_changes()


def _strip_meta(image: dict) -> dict:
    return {k: v for k, v in image.items() if k not in ("_pk", "_version")}


def encode_row(columns: dict) -> str:
    return json.dumps(columns, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def user_cache_key(username: str) -> str:
    return f"user:{username}"


def train_cache_key(train_id: str, service_date: str) -> str:
    return f"train:{train_id}:{service_date}"


def encode_route(train_ids: list[str]) -> str:
    return json.dumps(train_ids)


def derive_route(train_rows: Iterable[dict], service_date: str, departure: str, arrival: str) -> list[str]:
    """Train ids running on ``service_date`` that stop at ``departure`` before ``arrival``."""
    out = []
    for cols in train_rows:
        if cols["service_date"] != service_date:
            continue
        stations = segments.split_stations(cols["stations"])
        if departure in stations and arrival in stations and stations.index(departure) < stations.index(arrival):
            out.append(cols["train_id"])
    return sorted(out)


APPLIED = "applied"
SKIPPED_STALE = "skipped-stale"


class CacheApplier:
    """Applies change messages to the cache.

    Cache values are rebuilt from the event's images, never from deltas
    carried in the message, and a per-row version guard (hash
    ``cdc:version``) turns redelivered or overtaken events into no-ops.

    Derived keys:

    * ``seatmask:<train>:<date>``: per-seat ``"<seat_type>|<mask>"`` mirror;
    * ``remaining:<train>:<date>``: remaining-ticket count per token field,
      kept equal to what the mirrored masks imply;
    * ``user:<username>`` and ``train:<train>:<date>``: row JSON;
    * a train row change drops the cached route lists it could affect.
    """

    def __init__(self, cache: KVCache):
        self.cache = cache
        self.applied = 0
        self.skipped = 0

    def apply_change_message(self, msg: BusMessage | str) -> str:
        payload = msg.payload if isinstance(msg, BusMessage) else msg
        event = ChangeEvent.from_json(payload)
        guard_field = f"{event.table}:{event.primary_key}"
        handler = _HANDLERS.get(logical_table(event.table))
        with self.cache.atomic():
            seen = self.cache.hget(VERSION_HASH, guard_field)
            if seen is not None and int(seen) >= event.version:
                self.skipped += 1
                return SKIPPED_STALE
            if handler is not None:
                try:
                    handler(self.cache, event)
                except (KeyError, TypeError, ValueError) as exc:
                    raise PoisonMessage(f"cannot apply event {event.sequence}: {exc!r}") from None
            self.cache.hset(VERSION_HASH, guard_field, event.version)
        self.applied += 1
        return APPLIED


def _apply_seat(cache: KVCache, event: ChangeEvent) -> None:
    image = event.after or event.before
    train_id, date = image["train_id"], image["service_date"]
    seat_type = image["seat_type"]
    stations = segments.split_stations(image["stations"])
    mirror_key = segments.seat_mirror_key(train_id, date)
    rem_key = segments.remaining_key(train_id, date)

    old = cache.hget(mirror_key, event.primary_key)
    old_mask = None
    if old is not None:
        old_type, old_mask_text = str(old).split("|")
        old_mask = int(old_mask_text)
        if old_type != seat_type:
            raise ValueError("seat type changed")
    new_mask = int(event.after["mask"]) if event.after is not None else None

    current = cache.hgetall(rem_key)
    updates = {}
    for d, a, legs in segments.segment_masks(stations):
        name = segments.token_field(d, a, seat_type)
        before_free = old_mask is not None and not old_mask & legs
        after_free = new_mask is not None and not new_mask & legs
        updates[name] = int(current.get(name, 0)) + int(after_free) - int(before_free)
    cache.hset_many(rem_key, updates)
    if new_mask is None:
        cache.hdel(mirror_key, event.primary_key)
    else:
        cache.hset(mirror_key, event.primary_key, f"{seat_type}|{new_mask}")


def _apply_user(cache: KVCache, event: ChangeEvent) -> None:
    if event.before is not None and (
        event.after is None or event.before["username"] != event.after["username"]
    ):
        cache.delete(user_cache_key(event.before["username"]))
    if event.after is not None:
        cache.set(user_cache_key(event.after["username"]), encode_row(_strip_meta(event.after)))


def _apply_train(cache: KVCache, event: ChangeEvent) -> None:
    for image in (event.before, event.after):
        if image is None:
            continue
        stations = segments.split_stations(image["stations"])
        cache.delete(
            *(segments.route_cache_key(image["service_date"], d, a) for d, a in segments.station_pairs(stations))
        )
    if event.after is not None:
        after = event.after
        cache.set(train_cache_key(after["train_id"], after["service_date"]), encode_row(_strip_meta(after)))
    else:
        cache.delete(train_cache_key(event.before["train_id"], event.before["service_date"]))


_HANDLERS: dict[str, Callable[[KVCache, ChangeEvent], None]] = {
    "t_seat": _apply_seat,
    "t_user": _apply_user,
    "t_train": _apply_train,
}

CACHED_TABLES = frozenset(_HANDLERS)


class CdcConsumer:
    """Polls every ``cdc.*`` topic as one consumer group and applies messages.

    ``lose_ack`` lets tests drop acks for chosen messages to force
    redelivery after the visibility timeout.
    """

    def __init__(
        self,
        bus: MessageBus,
        applier: CacheApplier,
        group: str = "cache-applier",
        visibility_timeout_ms: float = 1_000,
    ):
        self.bus = bus
        self.applier = applier
        self.group = group
        self.visibility_timeout_ms = visibility_timeout_ms
        self.dead_lettered = 0
        self._thread: threading.Thread | None = None
        self._stop = threading.Event()

    def topics(self) -> list[str]:
        return [t for t in self.bus.topics() if t.startswith("cdc.") and t != DEAD_LETTER_TOPIC]

    def run_once(
        self, max_messages: int = 256, lose_ack: Callable[[BusMessage], bool] | None = None
    ) -> int:
        handled = 0
        for topic in self.topics():
            for msg in self.bus.poll(topic, self.group, max_messages, self.visibility_timeout_ms):
                try:
                    self.applier.apply_change_message(msg)
                except PoisonMessage as exc:
                    log.warning("dead-lettering %s@%d: %s", msg.topic, msg.offset, exc)
                    self.bus.publish(
                        DEAD_LETTER_TOPIC,
                        json.dumps({"topic": msg.topic, "offset": msg.offset, "payload": msg.payload, "error": str(exc)}),
                    )
                    self.dead_lettered += 1
                handled += 1
                if lose_ack is not None and lose_ack(msg):
                    continue
                self.bus.ack(msg.topic, self.group, msg.offset)
        return handled

    def idle(self) -> bool:
        return all(self.bus.pending(t, self.group) == 0 for t in self.topics())

    def start(self) -> None:
        self._stop.clear()
        self._thread = threading.Thread(target=self._run, name=f"cdc-{self.group}", daemon=True)
        self._thread.start()

    def _run(self) -> None:
        while not self._stop.is_set():
            if not self.run_once():
                self._stop.wait(0.002)

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
            self._thread = None


@dataclass
class ConvergenceReport:
    checked_keys: int = 0
    mismatches: list[tuple[str, object, object]] = field(default_factory=list)

    @property
    def convergent(self) -> bool:
        return not self.mismatches


def derive_cache_view(store: RecordStore) -> dict[str, object]:
    """Everything the applier should have written, recomputed by full scan."""
    view: dict[str, object] = {}
    by_train: dict[tuple[str, str], list[dict]] = {}
    seat_rows = [r for t in store.tables() if logical_table(t) == "t_seat" for r in store.rows(t)]
    for row in seat_rows:
        cols = row.columns
        by_train.setdefault((cols["train_id"], cols["service_date"]), []).append(row)
    for (train_id, date), rows in by_train.items():
        stations = segments.split_stations(rows[0].columns["stations"])
        view[segments.remaining_key(train_id, date)] = segments.remaining_counts(
            stations, ((r.columns["seat_type"], int(r.columns["mask"])) for r in rows)
        )
        view[segments.seat_mirror_key(train_id, date)] = {
            r.primary_key: f"{r.columns['seat_type']}|{int(r.columns['mask'])}" for r in rows
        }
    for table in store.tables():
        kind = logical_table(table)
        for row in store.rows(table) if kind in ("t_user", "t_train") else ():
            cols = row.columns
            if kind == "t_user":
                view[user_cache_key(cols["username"])] = encode_row(cols)
            else:
                view[train_cache_key(cols["train_id"], cols["service_date"])] = encode_row(cols)
    return view


_DERIVED_PREFIXES = ("remaining:", "seatmask:", "user:", "train:")


def verify_convergence(store: RecordStore, cache: KVCache) -> ConvergenceReport:
    """Compare every cache key derived from store tables with a fresh derivation.

    Call only at quiescence (pump drained, consumers idle).
    """
    report = ConvergenceReport()
    expected = derive_cache_view(store)
    train_rows = [r.columns for t in store.tables() if logical_table(t) == "t_train" for r in store.rows(t)]
    with cache.atomic():
        cached_keys = set()
        for prefix in _DERIVED_PREFIXES + ("route:",):
            cached_keys.update(cache.keys(prefix))
        for key in sorted(set(expected) | cached_keys):
            if key.startswith("route:"):
                _, date, dep, arr = key.split(":", 3)
                want: object = encode_route(derive_route(train_rows, date, dep, arr))
            else:
                want = expected.get(key)
            if key.startswith(("remaining:", "seatmask:")):
                got: object = cache.hgetall(key) or None
                if got is not None:
                    got = {f: (int(v) if key.startswith("remaining:") else v) for f, v in got.items()}
            else:
                got = cache.get(key)
            report.checked_keys += 1
            if got != want:
                report.mismatches.append((key, got, want))
    return report
