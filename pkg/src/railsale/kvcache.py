"""In-process key-value cache with string and hash values and millisecond TTLs.

Every command runs under one re-entrant lock, which gives the same
single-serialization-point contract a single-threaded cache server offers.
Callers that need several commands to appear as one (the analogue of a
server-side script) wrap them in :meth:`KVCache.atomic`.
"""
from __future__ import annotations

import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Union

from .errors import CacheTypeError

HashValue = Union[int, str]
Value = Union[str, dict]


def monotonic_ms() -> float:
    return time.monotonic() * 1000.0


@dataclass
class CacheEntry:
    value: Value
    expires_at: float | None = None


class KVCache:
    def __init__(self, clock: Callable[[], float] = monotonic_ms) -> None:
        self._clock = clock
        self._data: dict[str, CacheEntry] = {}
        self._lock = threading.RLock()
        self.commands = 0

    @contextmanager
    def atomic(self) -> Iterator["KVCache"]:
        with self._lock:
            yield self

    def now(self) -> float:
        return self._clock()

    def _live(self, key: str) -> CacheEntry | None:
        entry = self._data.get(key)
        if entry is None:
            return None
        if entry.expires_at is not None and self._clock() >= entry.expires_at:
            del self._data[key]
            return None
        return entry

    def _deadline(self, ttl_ms: float | None) -> float | None:
        if ttl_ms is None:
            return None
        return self._clock() + max(0, round(ttl_ms))

    # string commands

    def set(self, key: str, value: str, ttl_ms: float | None = None) -> None:
        with self._lock:
            self.commands += 1
            self._data[key] = CacheEntry(value, self._deadline(ttl_ms))

    def get(self, key: str) -> str | None:
        with self._lock:
            self.commands += 1
            entry = self._live(key)
            if entry is None:
                return None
            if isinstance(entry.value, dict):
                raise CacheTypeError(f"{key!r} holds a hash, not a string")
            return entry.value

    def compare_and_set(
        self, key: str, expected: str | None, new: str, ttl_ms: float | None = None
    ) -> bool:
        """Set ``key`` to ``new`` only if its current value is ``expected``
        (``None`` meaning absent)."""
        with self._lock:
            self.commands += 1
            entry = self._live(key)
            current = None if entry is None else entry.value
            if current != expected:
                return False
            self._data[key] = CacheEntry(new, self._deadline(ttl_ms))
            return True

    def delete(self, *keys: str) -> int:
        with self._lock:
            self.commands += 1
            removed = 0
            for key in keys:
                if self._live(key) is not None:
                    del self._data[key]
                    removed += 1
            return removed

    def exists(self, key: str) -> bool:
        with self._lock:
            return self._live(key) is not None

    def expire(self, key: str, ttl_ms: float) -> bool:
        with self._lock:
            entry = self._live(key)
            if entry is None:
                return False
            entry.expires_at = self._deadline(ttl_ms)
            return True

    def keys(self, prefix: str = "") -> list[str]:
        with self._lock:
            return [k for k in list(self._data) if k.startswith(prefix) and self._live(k)]

    # hash commands

    def _hash(self, key: str, create: bool) -> dict | None:
        entry = self._live(key)
        if entry is None:
            if not create:
                return None
            entry = self._data[key] = CacheEntry({})
        if not isinstance(entry.value, dict):
            raise CacheTypeError(f"{key!r} holds a string, not a hash")
        return entry.value

    def hset(self, key: str, field: str, value: HashValue) -> None:
        with self._lock:
            self.commands += 1
            self._hash(key, create=True)[field] = value

    def hset_many(self, key: str, mapping: dict[str, HashValue]) -> None:
        with self._lock:
            self.commands += 1
            self._hash(key, create=True).update(mapping)

    def hget(self, key: str, field: str) -> HashValue | None:
        with self._lock:
            self.commands += 1
            h = self._hash(key, create=False)
            return None if h is None else h.get(field)

    def hgetall(self, key: str) -> dict[str, HashValue]:
        with self._lock:
            self.commands += 1
            h = self._hash(key, create=False)
            return {} if h is None else dict(h)

    def hdel(self, key: str, *fields: str) -> int:
        with self._lock:
            self.commands += 1
            h = self._hash(key, create=False)
            if h is None:
                return 0
            removed = sum(1 for f in fields if h.pop(f, None) is not None)
            if not h:
                del self._data[key]
            return removed

    def hincrby(self, key: str, field: str, delta: int) -> int:
        with self._lock:
            self.commands += 1
            h = self._hash(key, create=True)
            current = h.get(field, 0)
            if not isinstance(current, int):
                try:
                    current = int(current)
                except ValueError:
                    raise CacheTypeError(f"{key}.{field} is not an integer") from None
            h[field] = current + delta
            return h[field]

    def hincr_if_at_least(self, key: str, field: str, floor: int, delta: int) -> int | None:
        """Atomically add ``delta`` to a hash field unless the result would drop
        below ``floor``.

        Returns the new value, or ``None`` (insufficient) leaving the field
        untouched. A missing field counts as 0.
        """
        with self._lock:
            self.commands += 1
            entry = self._live(key)
            h = None if entry is None else entry.value
            if h is not None and not isinstance(h, dict):
                raise CacheTypeError(f"{key!r} holds a string, not a hash")
            current = 0 if h is None else h.get(field, 0)
            if isinstance(current, str):
                try:
                    current = int(current)
                except ValueError:
                    raise CacheTypeError(f"{key}.{field} is not an integer") from None
            new = current + delta
            if new < floor:
                return None
            if h is None:
                h = self._hash(key, create=True)
            h[field] = new
            return new

    def expire_sweep(self, now: float | None = None) -> int:
        with self._lock:
            now = self._clock() if now is None else now
            dead = [
                k for k, e in self._data.items() if e.expires_at is not None and e.expires_at <= now
            ]
            for k in dead:
                del self._data[k]
            return len(dead)

    def __len__(self) -> int:
        with self._lock:
            return len(self._data)
