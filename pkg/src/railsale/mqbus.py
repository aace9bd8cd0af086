"""Topic-based in-process message bus with at-least-once, pull-based delivery.

Consumers poll as a named group. Delivered messages stay invisible to that
group for the visibility timeout and are handed out again unless acked in
the meantime. Every group sees every message of a topic.
"""
from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from typing import Callable


def monotonic_ms() -> float:
    return time.monotonic() * 1000.0


@dataclass(frozen=True)
class BusMessage:
    topic: str
    offset: int
    payload: str
    enqueue_time: float


@dataclass
class _GroupState:
    low: int = 0  # every offset below this is acked
    acked: set[int] = field(default_factory=set)
    invisible_until: dict[int, float] = field(default_factory=dict)
    deliveries: int = 0


class _Topic:
    def __init__(self, name: str) -> None:
        self.name = name
        self.messages: list[BusMessage] = []
        self.groups: dict[str, _GroupState] = {}
        self.lock = threading.Lock()
        self.cond = threading.Condition(self.lock)


class MessageBus:
    def __init__(self, clock: Callable[[], float] = monotonic_ms) -> None:
        self._clock = clock
        self._topics: dict[str, _Topic] = {}
        self._registry_lock = threading.Lock()

    def _topic(self, name: str) -> _Topic:
        topic = self._topics.get(name)
        if topic is None:
            with self._registry_lock:
                topic = self._topics.setdefault(name, _Topic(name))
        return topic

    def topics(self) -> list[str]:
        return sorted(self._topics)

    def publish(self, topic: str, payload: str) -> int:
        if not topic:
            raise ValueError("topic name must be non-empty")
        t = self._topic(topic)
        with t.cond:
            offset = len(t.messages)
            t.messages.append(BusMessage(topic, offset, payload, self._clock()))
            t.cond.notify_all()
            return offset

    def poll(
        self, topic: str, group: str, max_messages: int = 100, visibility_timeout_ms: float = 30_000
    ) -> list[BusMessage]:
        t = self._topic(topic)
        now = self._clock()
        out: list[BusMessage] = []
        with t.lock:
            g = t.groups.setdefault(group, _GroupState())
            for offset in range(g.low, len(t.messages)):
                if len(out) >= max_messages:
                    break
                if offset in g.acked or g.invisible_until.get(offset, 0.0) > now:
                    continue
                g.invisible_until[offset] = now + visibility_timeout_ms
                g.deliveries += 1
                out.append(t.messages[offset])
        return out

    def ack(self, topic: str, group: str, offset: int) -> None:
        t = self._topic(topic)
        with t.lock:
            g = t.groups.setdefault(group, _GroupState())
            if not 0 <= offset < len(t.messages) or offset < g.low or offset in g.acked:
                return
            g.acked.add(offset)
            g.invisible_until.pop(offset, None)
            while g.low in g.acked:
                g.acked.discard(g.low)
                g.low += 1

    def wait_for_messages(self, topic: str, group: str, timeout_s: float) -> bool:
        """Block until ``group`` has unacked messages on ``topic`` or the timeout passes."""
        t = self._topic(topic)
        with t.cond:
            g = t.groups.setdefault(group, _GroupState())
            return t.cond.wait_for(lambda: g.low < len(t.messages), timeout=timeout_s)

    def pending(self, topic: str, group: str) -> int:
        """Published but not yet acked by ``group``."""
        t = self._topic(topic)
        with t.lock:
            g = t.groups.get(group)
            if g is None:
                return len(t.messages)
            return len(t.messages) - g.low - len(g.acked)

    def size(self, topic: str) -> int:
        return len(self._topic(topic).messages)

    def deliveries(self, topic: str, group: str) -> int:
        t = self._topic(topic)
        with t.lock:
            g = t.groups.get(group)
            return 0 if g is None else g.deliveries
