"""Per-resource admission control and the gateway access filter.

Each resource has a :class:`FlowRule`. :meth:`FlowController.admit` hands
out a :class:`Permit` or raises :class:`FlowRejected`; the caller reports
how the call went with :meth:`FlowController.record_outcome`, which drives
the circuit breaker::

    CLOSED --(enough slow or failed samples)--> OPEN
    OPEN --(open_duration elapsed)--> HALF_OPEN
    HALF_OPEN --(every probe ok)--> CLOSED
    HALF_OPEN --(any probe slow or failed)--> OPEN

All times are milliseconds from an injectable clock.
"""
from __future__ import annotations

import itertools
import secrets
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable

from .errors import ConfigError, ContractViolation, RailsaleError
from .kvcache import KVCache

QPS_WINDOW_MS = 1_000.0


def monotonic_ms() -> float:
    return time.monotonic() * 1000.0


class BreakerState(str, Enum):
    CLOSED = "CLOSED"
    OPEN = "OPEN"
    HALF_OPEN = "HALF_OPEN"


@dataclass(frozen=True)
class FlowRule:
    resource: str
    qps_limit: int = 1_000
    max_concurrency: int = 256
    rt_threshold_ms: float = 500.0
    breaker_error_ratio: float = 0.5
    breaker_min_samples: int = 10
    open_duration_ms: float = 5_000.0
    half_open_probes: int = 3
    stat_window_ms: float = 1_000.0

    def __post_init__(self) -> None:
        for name in (
            "qps_limit",
            "max_concurrency",
            "rt_threshold_ms",
            "breaker_error_ratio",
            "breaker_min_samples",
            "open_duration_ms",
            "half_open_probes",
            "stat_window_ms",
        ):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{self.resource}: {name} must be positive")
        if self.breaker_error_ratio > 1:
            raise ConfigError(f"{self.resource}: breaker_error_ratio must be <= 1")


class FlowRejected(RailsaleError):
    def __init__(self, resource: str, reason: str):
        super().__init__(f"{resource}: rejected ({reason})")
        self.resource = resource
        self.reason = reason


@dataclass(frozen=True)
class Permit:
    resource: str
    permit_id: int
    probe: bool
    epoch: int
    admitted_at: float


@dataclass(frozen=True)
class BreakerSnapshot:
    state: BreakerState
    opened_at: float | None
    probe_budget: int


@dataclass
class _Resource:
    rule: FlowRule
    admits: deque = field(default_factory=deque)
    in_flight: int = 0
    state: BreakerState = BreakerState.CLOSED
    opened_at: float | None = None
    probe_budget: int = 0
    probes_ok: int = 0
    epoch: int = 0
    samples: deque = field(default_factory=deque)
    outstanding: set = field(default_factory=set)
    history: list = field(default_factory=lambda: [BreakerState.CLOSED])
    lock: threading.Lock = field(default_factory=threading.Lock)
    admitted: int = 0
    rejected: dict = field(default_factory=lambda: {"qps": 0, "concurrency": 0, "breaker": 0})


class FlowController:
    def __init__(self, rules: Iterable[FlowRule] = (), clock: Callable[[], float] = monotonic_ms):
        self._clock = clock
        self._resources: dict[str, _Resource] = {}
        self._ids = itertools.count(1)
        for rule in rules:
            self.register(rule)

    def register(self, rule: FlowRule) -> None:
        self._resources[rule.resource] = _Resource(rule)

    def _get(self, resource: str) -> _Resource:
        try:
            return self._resources[resource]
        except KeyError:
            raise ConfigError(f"no flow rule for resource {resource!r}") from None

    def _move(self, res: _Resource, state: BreakerState, now: float) -> None:
        res.state = state
        res.epoch += 1
        res.history.append(state)
        if state is BreakerState.OPEN:
            res.opened_at = now
            res.probe_budget = 0
        elif state is BreakerState.HALF_OPEN:
            res.probe_budget = res.rule.half_open_probes
            res.probes_ok = 0
        else:
            res.opened_at = None
            res.samples.clear()

    def _refresh(self, res: _Resource, now: float) -> None:
        if res.state is BreakerState.OPEN and now - res.opened_at >= res.rule.open_duration_ms:
            self._move(res, BreakerState.HALF_OPEN, now)

    def admit(self, resource: str, now: float | None = None) -> Permit:
        res = self._get(resource)
        now = self._clock() if now is None else now
        rule = res.rule
        with res.lock:
            self._refresh(res, now)
            if res.state is BreakerState.OPEN or (
                res.state is BreakerState.HALF_OPEN and res.probe_budget <= 0
            ):
                res.rejected["breaker"] += 1
                raise FlowRejected(resource, "breaker")
            while res.admits and res.admits[0] <= now - QPS_WINDOW_MS:
                res.admits.popleft()
            if len(res.admits) >= rule.qps_limit:
                res.rejected["qps"] += 1
                raise FlowRejected(resource, "qps")
            if res.in_flight >= rule.max_concurrency:
                res.rejected["concurrency"] += 1
                raise FlowRejected(resource, "concurrency")
            probe = res.state is BreakerState.HALF_OPEN
            if probe:
                res.probe_budget -= 1
            res.admits.append(now)
            res.in_flight += 1
            res.admitted += 1
            permit = Permit(resource, next(self._ids), probe, res.epoch, now)
            res.outstanding.add(permit.permit_id)
            return permit

    def record_outcome(self, permit: Permit, rt_ms: float, ok: bool, now: float | None = None) -> None:
        res = self._get(permit.resource)
        now = self._clock() if now is None else now
        rule = res.rule
        with res.lock:
            if permit.permit_id not in res.outstanding:
                raise ContractViolation(f"permit {permit.permit_id} already recorded or unknown")
            res.outstanding.discard(permit.permit_id)
            res.in_flight -= 1
            bad = rt_ms > rule.rt_threshold_ms or not ok
            if permit.epoch != res.epoch:
                return
            if res.state is BreakerState.HALF_OPEN and permit.probe:
                if bad:
                    self._move(res, BreakerState.OPEN, now)
                else:
                    res.probes_ok += 1
                    if res.probes_ok >= rule.half_open_probes:
                        self._move(res, BreakerState.CLOSED, now)
            elif res.state is BreakerState.CLOSED:
                res.samples.append((now, rt_ms > rule.rt_threshold_ms, not ok))
                while res.samples and res.samples[0][0] <= now - rule.stat_window_ms:
                    res.samples.popleft()
                n = len(res.samples)
                if n >= rule.breaker_min_samples:
                    slow = sum(1 for _, s, _ in res.samples if s)
                    failed = sum(1 for _, _, e in res.samples if e)
                    if max(slow, failed) / n >= rule.breaker_error_ratio:
                        self._move(res, BreakerState.OPEN, now)

    def force_open(self, resource: str, now: float | None = None) -> None:
        res = self._get(resource)
        now = self._clock() if now is None else now
        with res.lock:
            if res.state is not BreakerState.OPEN:
                self._move(res, BreakerState.OPEN, now)

    def breaker_state(self, resource: str, now: float | None = None) -> BreakerSnapshot:
        res = self._get(resource)
        now = self._clock() if now is None else now
        with res.lock:
            self._refresh(res, now)
            return BreakerSnapshot(res.state, res.opened_at, res.probe_budget)

    def history(self, resource: str) -> list[BreakerState]:
        res = self._get(resource)
        with res.lock:
            return list(res.history)

    def in_flight(self, resource: str) -> int:
        return self._get(resource).in_flight

    def snapshot(self) -> dict:
        out = {}
        for name, res in self._resources.items():
            with res.lock:
                out[name] = {
                    "state": res.state.value,
                    "in_flight": res.in_flight,
                    "admitted": res.admitted,
                    "rejected": dict(res.rejected),
                }
        return out


@dataclass
class AccessPolicy:
    whitelist: set[str] = field(default_factory=set)
    blacklist: set[str] = field(default_factory=set)
    open_paths: set[str] = field(default_factory=set)


@dataclass(frozen=True)
class GatewayDecision:
    allowed: bool
    reason: str | None = None
    principal: str | None = None


class SessionStore:
    """Opaque login tokens held in the cache with a TTL."""

    def __init__(self, cache: KVCache, ttl_ms: float = 3_600_000):
        self.cache = cache
        self.ttl_ms = ttl_ms

    def issue(self, username: str) -> str:
        token = secrets.token_urlsafe(24)
        self.cache.set(f"session:{token}", username, ttl_ms=self.ttl_ms)
        return token

    def resolve(self, token: str | None) -> str | None:
        if not token:
            return None
        return self.cache.get(f"session:{token}")

    def revoke(self, token: str) -> None:
        self.cache.delete(f"session:{token}")


def gateway_filter(
    policy: AccessPolicy,
    sessions: SessionStore,
    principal: str | None,
    ip: str | None,
    auth_token: str | None,
    path: str | None = None,
) -> GatewayDecision:
    """Blacklist beats whitelist, which beats the login check."""
    session_user = sessions.resolve(auth_token)
    who = principal or session_user
    if (ip is not None and ip in policy.blacklist) or (who is not None and who in policy.blacklist) or (
        session_user is not None and session_user in policy.blacklist
    ):
        return GatewayDecision(False, "blacklist", who)
    if (path is not None and path in policy.open_paths) or (who is not None and who in policy.whitelist) or (
        ip is not None and ip in policy.whitelist
    ):
        return GatewayDecision(True, None, session_user or principal)
    if session_user is None:
        return GatewayDecision(False, "auth", principal)
    if principal is not None and principal != session_user:
        return GatewayDecision(False, "auth", principal)
    return GatewayDecision(True, None, session_user)
