"""The engine: every component wired together behind request-level operations.

Read path (train query)::

    gateway -> admit("query") -> route Bloom filter -> cache -> store (+ cache fill)

Write path (purchase)::

    gateway -> admit("purchase") -> token deduction -> seat allocation -> order

Any failure after the token deduction gives back the tokens (and the seats,
if they were allocated) before the error is returned.
"""
from __future__ import annotations

import hashlib
import hmac
import json
import logging
import os
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator

from . import segments
from .bloom import BloomFilter
from .config import EngineConfig
from .errors import (
    ContainerNotInitialized,
    DuplicateSubmission,
    InvalidTransition,
    OrderNotFound,
    PermissionDenied,
    SeatsExhausted,
    StaleForm,
)
from .flowcontrol import AccessPolicy, FlowController, FlowRejected, SessionStore, gateway_filter
from .idgen import SnowflakeGenerator
from .inventory import SEAT_TABLE, TRAIN_TABLE, Inventory, TrainPlan
from .kvcache import KVCache
from .mqbus import MessageBus
from .aescore import encode_field
from .orders import OrderService, OrderStatus, Passenger, User, order_summary
from .recordstore import (
    CACHED_TABLES,
    CacheApplier,
    CdcConsumer,
    CdcPump,
    RecordStore,
    derive_route,
    encode_route,
    user_cache_key,
    verify_convergence,
    ConvergenceReport,
    Mutation,
)
from .shardrouter import route_by_username

log = logging.getLogger(__name__)

USER_TABLE = "t_user"


def wall_ms() -> int:
    return time.time_ns() // 1_000_000


class ApiError(Exception):
    """Error returned to API clients; ``code`` is stable and machine-readable."""

    def __init__(self, code: str, message: str, status: int, retryable: bool = False):
        super().__init__(message)
        self.code = code
        self.message = message
        self.status = status
        self.retryable = retryable

    def to_dict(self) -> dict:
        return {"code": self.code, "message": self.message, "retryable": self.retryable}


# code -> (http status, retryable)
ERROR_CODES = {
    "bad_request": (400, False),
    "unauthorized": (401, False),
    "bad_credentials": (401, False),
    "forbidden": (403, False),
    "permission_denied": (403, False),
    "not_found": (404, False),
    "sold_out": (409, False),
    "duplicate_submission": (409, False),
    "invalid_transition": (409, False),
    "username_taken": (409, False),
    "stale_form": (410, False),
    "rate_limited": (429, True),
    "degraded": (503, True),
    "internal": (500, True),
}


def api_error(code: str, message: str) -> ApiError:
    status, retryable = ERROR_CODES[code]
    return ApiError(code, message, status, retryable)


@dataclass(frozen=True)
class RequestContext:
    auth_token: str | None = None
    ip: str | None = None
    principal: str | None = None
    path: str | None = None


class Engine:
    def __init__(self, config: EngineConfig | None = None, clock_ms: Callable[[], int] = wall_ms):
        self.config = config = config or EngineConfig()
        self.clock_ms = clock_ms
        self.store = RecordStore(log_path=config.persistence_path)
        self.cache = KVCache()
        self.bus = MessageBus()
        layout = config.snowflake.layout
        ident = (config.snowflake.datacenter_id, config.snowflake.worker_id)
        self.order_ids = SnowflakeGenerator(*ident, layout=layout)
        self.user_ids = SnowflakeGenerator(*ident, layout=layout)
        self.user_bloom = BloomFilter.for_capacity(config.bloom.users_n, config.bloom.users_p)
        self.route_bloom = BloomFilter.for_capacity(config.bloom.routes_n, config.bloom.routes_p)
        self.topology = config.shards
        for route in self.topology.all_routes():
            self.store.create_table(route.table_name(USER_TABLE))
        self.inventory = Inventory(self.store, self.cache)
        self.orders = OrderService(
            self.store,
            self.cache,
            self.inventory,
            self.order_ids,
            self.topology,
            config.field_key_bytes,
            clock=clock_ms,
            payment_deadline_ms=config.payment_deadline_ms,
            dedup_ttl_ms=config.ttl.dedup_ms,
            fares=config.fares,
        )
        self.flow = FlowController(config.flow_rules)
        self.policy = AccessPolicy(
            set(config.access.whitelist), set(config.access.blacklist), set(config.access.open_paths)
        )
        self.sessions = SessionStore(self.cache, ttl_ms=config.ttl.session_ms)
        self.pump = CdcPump(self.store, self.bus, CACHED_TABLES)
        self.applier = CacheApplier(self.cache)
        self.consumers = [
            CdcConsumer(self.bus, self.applier, visibility_timeout_ms=config.cdc.visibility_timeout_ms)
            for _ in range(config.cdc.appliers)
        ]
        self._register_lock = threading.Lock()
        self._metrics_lock = threading.Lock()
        self.bloom_short_circuits = 0
        self.orders_created = 0
        self._scheduler: threading.Thread | None = None
        self._stop = threading.Event()
        self.running = False
        self._rebuild_blooms()
        for plan in self.inventory.recover():
            self._insert_route_keys(plan)
        self.orders.recover()
        for plan in config.trains:
            if (plan.train_id, plan.service_date) not in {(p.train_id, p.service_date) for p in self.inventory.plans()}:
                self.add_train(plan)

    def _rebuild_blooms(self) -> None:
        for table in self.store.tables():
            if table.startswith(USER_TABLE + "_"):
                for row in self.store.rows(table):
                    self.user_bloom.insert(row.columns["username"])

    # lifecycle

    def start(self) -> None:
        if self.running:
            return
        self._stop.clear()
        self.pump.start()
        for c in self.consumers:
            c.start()
        self._scheduler = threading.Thread(target=self._schedule, name="order-closer", daemon=True)
        self._scheduler.start()
        self.running = True

    def _schedule(self) -> None:
        interval = self.config.close_interval_ms / 1000.0
        while not self._stop.wait(interval):
            try:
                self.orders.close_expired()
                self.cache.expire_sweep()
            except Exception:  # keep the scheduler alive
                log.exception("scheduled close failed")

    def stop(self) -> None:
        if not self.running:
            return
        self._stop.set()
        if self._scheduler is not None:
            self._scheduler.join()
        self.pump.stop()
        self.quiesce(timeout_s=10)
        for c in self.consumers:
            c.stop()
        self.running = False

    def close(self) -> None:
        self.stop()
        self.store.close()

    def sync(self) -> None:
        """Pump and apply until quiescent, in the calling thread."""
        while True:
            self.pump.pump_changes()
            handled = sum(c.run_once() for c in self.consumers)
            if not handled and self.pump.drained() and all(c.idle() for c in self.consumers):
                return

    def quiesce(self, timeout_s: float = 10.0) -> bool:
        """Wait for the background pipeline to drain (or drain it inline when stopped)."""
        if not self.running:
            self.sync()
            return True
        deadline = time.monotonic() + timeout_s
        while time.monotonic() < deadline:
            if self.pump.drained() and all(c.idle() for c in self.consumers):
                return True
            time.sleep(0.005)
        return False

    def verify_convergence(self) -> ConvergenceReport:
        return verify_convergence(self.store, self.cache)

    # setup

    def add_train(self, plan: TrainPlan) -> None:
        self.inventory.add_train(plan)
        self._insert_route_keys(plan)

    def _insert_route_keys(self, plan: TrainPlan) -> None:
        for d, a in segments.station_pairs(plan.stations):
            self.route_bloom.insert(segments.route_bloom_key(plan.service_date, d, a))

    # gateway + flow control

    @contextmanager
    def _guard(self, resource: str, ctx: RequestContext, public: bool = False) -> Iterator[str | None]:
        """Gateway check, then flow admission; the outcome is recorded on exit.

        ``public`` operations (register, login, availability) skip the login
        check but not the blacklist.
        """
        decision = gateway_filter(self.policy, self.sessions, ctx.principal, ctx.ip, ctx.auth_token, ctx.path)
        if not decision.allowed and not (public and decision.reason == "auth"):
            if decision.reason == "blacklist":
                raise api_error("forbidden", "access denied")
            raise api_error("unauthorized", "login required")
        try:
            permit = self.flow.admit(resource)
        except FlowRejected as exc:
            if exc.reason == "breaker":
                raise api_error("degraded", f"{resource} is temporarily unavailable") from None
            raise api_error("rate_limited", f"too many {resource} requests") from None
        started = time.monotonic()
        ok = True
        try:
            yield decision.principal
        except ApiError as exc:
            ok = exc.status < 500
            raise
        except Exception:
            ok = False
            raise
        finally:
            self.flow.record_outcome(permit, (time.monotonic() - started) * 1000.0, ok)

    def _user(self, username: str | None) -> User:
        if username is None:
            raise api_error("unauthorized", "login required")
        row = self._load_user(username)
        if row is None:
            raise api_error("unauthorized", "unknown user")
        return User(int(row["user_id"]), username)

    def _load_user(self, username: str) -> dict | None:
        cached = self.cache.get(user_cache_key(username))
        if cached is not None:
            return json.loads(cached)
        table = route_by_username(username, self.topology).table_name(USER_TABLE)
        row = self.store.get(table, username)
        return None if row is None else row.columns

    # membership

    def _hash_password(self, password: str, salt: bytes) -> str:
        return hashlib.pbkdf2_hmac("sha256", password.encode(), salt, self.config.password_iterations).hex()

    def username_available(self, username: str, ctx: RequestContext = RequestContext()) -> bool:
        with self._guard("lookup", ctx, public=True):
            return self._username_available(username)

    def _username_available(self, username: str) -> bool:
        if not self.user_bloom.maybe_contains(username):
            with self._metrics_lock:
                self.bloom_short_circuits += 1
            return True
        return self._load_user(username) is None

    def register(
        self, username: str, password: str, id_number: str, phone: str, ctx: RequestContext = RequestContext()
    ) -> dict:
        with self._guard("register", ctx, public=True):
            if not username or not password or not id_number or not phone:
                raise api_error("bad_request", "username, password, id_number and phone are required")
            if any(c in username for c in ": \t\n"):
                raise api_error("bad_request", "username may not contain ':' or whitespace")
            with self._register_lock:
                if not self._username_available(username):
                    raise api_error("username_taken", f"{username} is taken")
                # bloom first: a concurrent availability check must not see a gap
                self.user_bloom.insert(username)
                salt = os.urandom(16)
                user_id = self.user_ids.next_id()
                key = self.config.field_key_bytes
                table = route_by_username(username, self.topology).table_name(USER_TABLE)
                self.store.commit_with_change(
                    [
                        Mutation.insert(
                            table,
                            username,
                            {
                                "user_id": user_id,
                                "username": username,
                                "password_hash": self._hash_password(password, salt),
                                "salt": salt.hex(),
                                "id_number": encode_field(id_number, key).hex,
                                "phone": encode_field(phone, key).hex,
                                "created_at": self.clock_ms(),
                            },
                        )
                    ]
                )
            return {"user_id": user_id, "username": username}

    def login(self, username: str, password: str, ctx: RequestContext = RequestContext()) -> dict:
        with self._guard("login", ctx, public=True):
            row = self._load_user(username) if self.user_bloom.maybe_contains(username) else None
            if row is None:
                raise api_error("bad_credentials", "wrong username or password")
            expected = self._hash_password(password, bytes.fromhex(row["salt"]))
            if not hmac.compare_digest(expected, row["password_hash"]):
                raise api_error("bad_credentials", "wrong username or password")
            return {"token": self.sessions.issue(username), "user_id": row["user_id"]}

    # ticketing

    def query_trains(self, service_date: str, departure: str, arrival: str, ctx: RequestContext) -> list[dict]:
        with self._guard("query", ctx):
            if not self.route_bloom.maybe_contains(segments.route_bloom_key(service_date, departure, arrival)):
                with self._metrics_lock:
                    self.bloom_short_circuits += 1
                return []
            route_key = segments.route_cache_key(service_date, departure, arrival)
            cached = self.cache.get(route_key)
            if cached is None:
                # cache lock held across the store read so a concurrent CDC invalidation cannot be overwritten
                with self.cache.atomic():
                    cached = self.cache.get(route_key)
                    if cached is None:
                        rows = self.store.scan(TRAIN_TABLE, lambda c: c["service_date"] == service_date)
                        cached = encode_route(derive_route((r.columns for r in rows), service_date, departure, arrival))
                        self.cache.set(route_key, cached, ttl_ms=self.config.ttl.route_cache_ms)
            results = []
            for train_id in json.loads(cached):
                remaining = self.cache.hgetall(segments.remaining_key(train_id, service_date))
                if not remaining:
                    remaining = self._remaining_from_store(train_id, service_date)
                prefix = f"{departure}_{arrival}_"
                results.append(
                    {
                        "train_id": train_id,
                        "service_date": service_date,
                        "departure": departure,
                        "arrival": arrival,
                        "remaining": {
                            f[len(prefix):]: int(v) for f, v in sorted(remaining.items()) if f.startswith(prefix)
                        },
                    }
                )
            return results

    def _remaining_from_store(self, train_id: str, service_date: str) -> dict[str, int]:
        rows = self.store.scan(
            SEAT_TABLE, lambda c: c["train_id"] == train_id and c["service_date"] == service_date
        )
        if not rows:
            return {}
        stations = segments.split_stations(rows[0].columns["stations"])
        return segments.remaining_counts(stations, ((r.columns["seat_type"], int(r.columns["mask"])) for r in rows))

    def issue_dedup_token(self, ctx: RequestContext) -> str:
        decision = gateway_filter(self.policy, self.sessions, ctx.principal, ctx.ip, ctx.auth_token, ctx.path)
        if not decision.allowed:
            raise api_error("forbidden" if decision.reason == "blacklist" else "unauthorized", "login required")
        return self.orders.issue_dedup_token()

    def purchase(self, request: dict, ctx: RequestContext) -> dict:
        with self._guard("purchase", ctx) as username:
            user = self._user(username)
            try:
                train_id = str(request["train_id"])
                service_date = str(request["service_date"])
                key = segments.SegmentKey(str(request["departure"]), str(request["arrival"]), str(request["seat_type"]))
                dedup = str(request["dedup"])
                passengers = [
                    Passenger(str(p["name"]), str(p["id_number"]), str(p.get("ticket_type", "adult")))
                    for p in request["passengers"]
                ]
                preference = [tuple(int(x) for x in pos) for pos in request.get("preference") or ()]
            except (KeyError, TypeError, ValueError) as exc:
                raise api_error("bad_request", f"malformed purchase request: {exc}") from None
            if not passengers:
                raise api_error("bad_request", "at least one passenger is required")
            try:
                self.inventory.plan(train_id, service_date).validate_key(key)
            except KeyError as exc:
                raise api_error("not_found", str(exc.args[0])) from None
            try:
                self.orders.check_dedup(dedup)
            except DuplicateSubmission as exc:
                raise api_error("duplicate_submission", str(exc)) from None
            except StaleForm as exc:
                raise api_error("stale_form", str(exc)) from None

            count = len(passengers)
            try:
                granted = self.inventory.deduct_tokens(train_id, service_date, key, count)
            except ContainerNotInitialized as exc:
                raise api_error("internal", str(exc)) from None
            if not granted:
                raise api_error("sold_out", f"not enough tickets for {key.field}")
            try:
                allocation = self.inventory.allocate_seats(train_id, service_date, key, count, preference)
            except SeatsExhausted:
                self.inventory.refund_tokens(train_id, service_date, key, count)
                raise api_error("sold_out", f"not enough seats for {key.field}") from None
            except BaseException:
                self.inventory.refund_tokens(train_id, service_date, key, count)
                raise
            try:
                order = self.orders.create_order(user, allocation, passengers, dedup)
            except DuplicateSubmission as exc:
                self.inventory.release_seats(allocation)
                raise api_error("duplicate_submission", str(exc)) from None
            except StaleForm as exc:
                self.inventory.release_seats(allocation)
                raise api_error("stale_form", str(exc)) from None
            except ValueError as exc:
                self.inventory.release_seats(allocation)
                raise api_error("bad_request", str(exc)) from None
            except BaseException:
                self.inventory.release_seats(allocation)
                raise
            with self._metrics_lock:
                self.orders_created += 1
            return order_summary(order)

    def _owned_order(self, order_no: str, user: User):
        try:
            order = self.orders.get(order_no)
        except OrderNotFound:
            raise api_error("not_found", f"no order {order_no}") from None
        if order.user_id != user.user_id:
            raise api_error("permission_denied", "not your order")
        return order

    def cancel(self, order_no: str, ctx: RequestContext) -> dict:
        with self._guard("cancel", ctx) as username:
            user = self._user(username)
            self._owned_order(order_no, user)
            try:
                status = self.orders.cancel_order(order_no, user)
            except InvalidTransition as exc:
                raise api_error("invalid_transition", str(exc)) from None
            except PermissionDenied as exc:
                raise api_error("permission_denied", str(exc)) from None
            return {"order_no": order_no, "status": status.value}

    def pay(self, order_no: str, ctx: RequestContext) -> dict:
        """Record a payment and deliver the simulated provider's success callback."""
        with self._guard("pay", ctx) as username:
            user = self._user(username)
            order = self._owned_order(order_no, user)
            if order.status is not OrderStatus.PENDING_PAYMENT:
                raise api_error("invalid_transition", f"{order_no} is {order.status.value}")
            callback_id = f"cb-{self.order_ids.next_id()}"
            pay_id = self.orders.record_payment(order_no, callback_id)
            status = self.orders.payment_callback(order_no, True, callback_id)
            if status is not OrderStatus.PAID:
                raise api_error("invalid_transition", f"{order_no} is {status.value}")
            return {"order_no": order_no, "status": status.value, "pay_id": pay_id, "callback_id": callback_id}

    def payment_callback(self, body: dict, ctx: RequestContext) -> dict:
        with self._guard("pay", ctx):
            try:
                order_no = str(body["order_no"])
                result = str(body["result"])
                callback_id = str(body["callback_id"])
            except (KeyError, TypeError) as exc:
                raise api_error("bad_request", f"malformed callback: {exc}") from None
            if result not in ("success", "failure"):
                raise api_error("bad_request", "result must be 'success' or 'failure'")
            try:
                status = self.orders.payment_callback(order_no, result == "success", callback_id)
            except OrderNotFound:
                raise api_error("not_found", f"no order {order_no}") from None
            return {"order_no": order_no, "status": status.value, "callback_id": callback_id}

    def orders_by_passenger(self, id_number: str, ctx: RequestContext) -> list[dict]:
        with self._guard("lookup", ctx):
            return self.orders.find_orders_by_passenger(id_number)

    # observability

    def metrics(self) -> dict:
        inv = self.inventory
        return {
            "store_reads": self.store.reads,
            "bloom_short_circuits": self.bloom_short_circuits,
            "oversell_alarms": inv.oversell_alarms,
            "token_grants": inv.token_grants,
            "token_rejections": inv.token_rejections,
            "token_refunds": inv.token_refunds,
            "orders_created": self.orders_created,
            "manual_refunds": len(self.orders.manual_refunds),
            "cdc_applied": self.applier.applied,
            "cdc_skipped_stale": self.applier.skipped,
            "cdc_dead_letters": sum(c.dead_lettered for c in self.consumers),
            "breaker_states": {name: s["state"] for name, s in self.flow.snapshot().items()},
            "flow": self.flow.snapshot(),
        }
