"""Snowflake-style 64-bit ordered unique IDs with a configurable bit layout.

An id is laid out, from the most significant bit down, as::

    sign(1) | timestamp offset | datacenter id | worker id | sequence

and is built as ``(ts - epoch) << ts_shift | dc << dc_shift | worker << worker_shift | seq``.
"""
from __future__ import annotations

import threading
import time
from dataclasses import dataclass
from typing import Callable

from .errors import ClockRegressionError, LayoutError

# 2024-01-01T00:00:00Z
DEFAULT_EPOCH_MS = 1_704_067_200_000

# Backwards clock steps up to this many milliseconds are waited out.
CLOCK_REGRESSION_TOLERANCE_MS = 5


def wall_clock_ms() -> int:
    return time.time_ns() // 1_000_000


@dataclass(frozen=True)
class SnowflakeLayout:
    epoch_ms: int = DEFAULT_EPOCH_MS
    timestamp_bits: int = 41
    datacenter_bits: int = 5
    worker_bits: int = 5
    sequence_bits: int = 12

    @property
    def worker_shift(self) -> int:
        return self.sequence_bits

    @property
    def datacenter_shift(self) -> int:
        return self.sequence_bits + self.worker_bits

    @property
    def timestamp_shift(self) -> int:
        return self.sequence_bits + self.worker_bits + self.datacenter_bits

    @property
    def max_sequence(self) -> int:
        return (1 << self.sequence_bits) - 1

    @property
    def max_worker_id(self) -> int:
        return (1 << self.worker_bits) - 1

    @property
    def max_datacenter_id(self) -> int:
        return (1 << self.datacenter_bits) - 1

    @property
    def max_timestamp_offset(self) -> int:
        return (1 << self.timestamp_bits) - 1


@dataclass(frozen=True)
class IdParts:
    timestamp_offset_ms: int
    datacenter_id: int
    worker_id: int
    sequence: int


def validate_layout(layout: SnowflakeLayout, now_ms: int | None = None) -> None:
    """Raise :class:`LayoutError` if ``layout`` cannot produce valid 63-bit ids.

    The error's ``reason`` attribute is one of ``"width-sum"``, ``"zero-width"``
    or ``"epoch-future"``.
    """
    widths = {
        "timestamp_bits": layout.timestamp_bits,
        "datacenter_bits": layout.datacenter_bits,
        "worker_bits": layout.worker_bits,
    }
    for name, width in widths.items():
        if width < 1:
            err = LayoutError(f"{name} must be at least 1, got {width}")
            err.reason = "zero-width"
            raise err
    if layout.sequence_bits < 0:
        err = LayoutError(f"sequence_bits must be non-negative, got {layout.sequence_bits}")
        err.reason = "zero-width"
        raise err
    total = sum(widths.values()) + layout.sequence_bits
    if total != 63:
        err = LayoutError(f"field widths sum to {total + 1} bits with the sign bit, expected 64")
        err.reason = "width-sum"
        raise err
    now_ms = wall_clock_ms() if now_ms is None else now_ms
    if layout.epoch_ms > now_ms:
        err = LayoutError(f"epoch {layout.epoch_ms} is in the future (now {now_ms})")
        err.reason = "epoch-future"
        raise err


def compose(parts: IdParts, layout: SnowflakeLayout) -> int:
    for value, limit, name in (
        (parts.timestamp_offset_ms, layout.max_timestamp_offset, "timestamp_offset_ms"),
        (parts.datacenter_id, layout.max_datacenter_id, "datacenter_id"),
        (parts.worker_id, layout.max_worker_id, "worker_id"),
        (parts.sequence, layout.max_sequence, "sequence"),
    ):
        if not 0 <= value <= limit:
            raise ValueError(f"{name}={value} does not fit in its field (max {limit})")
    return (
        (parts.timestamp_offset_ms << layout.timestamp_shift)
        | (parts.datacenter_id << layout.datacenter_shift)
        | (parts.worker_id << layout.worker_shift)
        | parts.sequence
    )


def decompose(id_: int, layout: SnowflakeLayout = SnowflakeLayout()) -> IdParts:
    if id_ < 0:
        raise ValueError("ids are non-negative")
    return IdParts(
        timestamp_offset_ms=(id_ >> layout.timestamp_shift) & layout.max_timestamp_offset,
        datacenter_id=(id_ >> layout.datacenter_shift) & layout.max_datacenter_id,
        worker_id=(id_ >> layout.worker_shift) & layout.max_worker_id,
        sequence=id_ & layout.max_sequence,
    )


class SnowflakeGenerator:
    """Thread-safe id generator for one (datacenter_id, worker_id) identity.

    ``clock`` returns the current time in integer milliseconds; tests inject a
    fake one.
    """

    def __init__(
        self,
        datacenter_id: int = 0,
        worker_id: int = 0,
        layout: SnowflakeLayout = SnowflakeLayout(),
        clock: Callable[[], int] = wall_clock_ms,
    ) -> None:
        validate_layout(layout, clock())
        if not 0 <= datacenter_id <= layout.max_datacenter_id:
            raise LayoutError(f"datacenter_id {datacenter_id} out of range")
        if not 0 <= worker_id <= layout.max_worker_id:
            raise LayoutError(f"worker_id {worker_id} out of range")
        self.layout = layout
        self.datacenter_id = datacenter_id
        self.worker_id = worker_id
        self._clock = clock
        self._lock = threading.Lock()
        self._last_ms = -1
        self._sequence = 0
        self._node_bits = (datacenter_id << layout.datacenter_shift) | (worker_id << layout.worker_shift)

    def _wait_past(self, last_ms: int) -> int:
        now = self._clock()
        while now <= last_ms:
            now = self._clock()
        return now

    def next_id(self) -> int:
        layout = self.layout
        with self._lock:
            now = self._clock()
            if now < self._last_ms:
                if self._last_ms - now > CLOCK_REGRESSION_TOLERANCE_MS:
                    raise ClockRegressionError(
                        f"clock moved backwards by {self._last_ms - now} ms"
                    )
                now = self._wait_past(self._last_ms - 1)
            if now == self._last_ms:
                self._sequence = (self._sequence + 1) & layout.max_sequence
                if self._sequence == 0:
                    now = self._wait_past(self._last_ms)
            else:
                self._sequence = 0
            self._last_ms = now
            offset = now - layout.epoch_ms
            if offset > layout.max_timestamp_offset:
                raise LayoutError("timestamp field exhausted for this epoch")
            return (offset << layout.timestamp_shift) | self._node_bits | self._sequence
