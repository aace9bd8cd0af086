"""Order lifecycle: creation, payment callbacks, cancellation and delayed close.

Allowed transitions::

    PENDING_PAYMENT -> PAID | CANCELLED | CLOSED

and every other status is terminal. Each order has its own lock, so a
payment callback, a user cancel and the close scheduler racing on one order
are serialized and exactly one of them moves it out of PENDING_PAYMENT.
"""
from __future__ import annotations

import hashlib
import heapq
import hmac
import logging
import secrets
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

from .aescore import decode_field, encode_field
from .errors import DuplicateSubmission, InvalidTransition, OrderNotFound, PermissionDenied, StaleForm
from .idgen import SnowflakeGenerator
from .inventory import Allocation, Inventory, SeatAssignment
from .kvcache import KVCache
from .recordstore import Mutation, RecordStore
from .segments import SegmentKey
from .shardrouter import ShardTopology, route_by_trailing_digits

log = logging.getLogger(__name__)

ORDER_TABLE = "t_order"
ORDER_ITEM_TABLE = "t_order_item"
ROUTE_TABLE = "t_passenger_route"
PAY_TABLE = "t_pay"

DEFAULT_PAYMENT_DEADLINE_MS = 600_000
DEFAULT_DEDUP_TTL_MS = 900_000

# cents per leg travelled
DEFAULT_FARES = {"second": 5_000, "first": 8_000, "business": 15_000}
TICKET_DISCOUNT = {"adult": 1.0, "student": 0.75, "child": 0.5}


def wall_ms() -> int:
    return time.time_ns() // 1_000_000


class OrderStatus(str, Enum):
    PENDING_PAYMENT = "PENDING_PAYMENT"
    PAID = "PAID"
    CANCELLED = "CANCELLED"
    CLOSED = "CLOSED"


TRANSITIONS = {
    OrderStatus.PENDING_PAYMENT: frozenset({OrderStatus.PAID, OrderStatus.CANCELLED, OrderStatus.CLOSED}),
    OrderStatus.PAID: frozenset(),
    OrderStatus.CANCELLED: frozenset(),
    OrderStatus.CLOSED: frozenset(),
}


@dataclass(frozen=True)
class User:
    user_id: int
    username: str


@dataclass(frozen=True)
class Passenger:
    name: str
    id_number: str
    ticket_type: str = "adult"


@dataclass(frozen=True)
class OrderItem:
    passenger_id_number: str  # hex ciphertext
    passenger_name: str  # hex ciphertext
    seat: SeatAssignment
    ticket_type: str
    price: int


@dataclass
class Order:
    order_no: str
    user_id: int
    username: str
    train_id: str
    service_date: str
    segment: SegmentKey
    status: OrderStatus
    created_at: int
    deadline: int
    items: list[OrderItem]
    allocation: Allocation
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)
    history: list[OrderStatus] = field(default_factory=list, repr=False, compare=False)

    @property
    def total_price(self) -> int:
        return sum(i.price for i in self.items)


def order_number(snowflake_id: int, user_id: int) -> str:
    return f"{snowflake_id}{user_id % 1_000_000:06d}"


def mask_id_number(id_number: str) -> str:
    if len(id_number) <= 8:
        return "*" * (len(id_number) - 2) + id_number[-2:]
    return id_number[:4] + "*" * (len(id_number) - 8) + id_number[-4:]


def mask_name(name: str) -> str:
    return name[:1] + "*" * (len(name) - 1)


class OrderService:
    def __init__(
        self,
        store: RecordStore,
        cache: KVCache,
        inventory: Inventory,
        ids: SnowflakeGenerator,
        topology: ShardTopology,
        field_key: bytes,
        clock: Callable[[], int] = wall_ms,
        payment_deadline_ms: int = DEFAULT_PAYMENT_DEADLINE_MS,
        dedup_ttl_ms: int = DEFAULT_DEDUP_TTL_MS,
        fares: dict[str, int] | None = None,
    ):
        self.store = store
        self.cache = cache
        self.inventory = inventory
        self.ids = ids
        self.topology = topology
        self.field_key = field_key
        self.clock = clock
        self.payment_deadline_ms = payment_deadline_ms
        self.dedup_ttl_ms = dedup_ttl_ms
        self.fares = dict(DEFAULT_FARES if fares is None else fares)
        for route in topology.all_routes():
            store.create_table(route.table_name(ORDER_TABLE))
            store.create_table(route.table_name(ORDER_ITEM_TABLE))
        store.create_table(ROUTE_TABLE)
        store.create_index(ROUTE_TABLE, "digest")
        store.create_table(PAY_TABLE)
        self._orders: dict[str, Order] = {}
        self._orders_lock = threading.Lock()
        self._deadlines: list[tuple[int, str]] = []
        self._deadline_lock = threading.Lock()
        self._callbacks: dict[str, OrderStatus] = {}
        self.manual_refunds: list[str] = []

    # duplicate-submission guard

    def issue_dedup_token(self) -> str:
        token = secrets.token_urlsafe(16)
        self.cache.set(f"dedup:{token}", "unused", ttl_ms=self.dedup_ttl_ms)
        return token

    def check_dedup(self, token: str) -> None:
        """Raise if ``token`` can no longer be consumed; does not consume it."""
        state = self.cache.get(f"dedup:{token}")
        if state == "consumed":
            raise DuplicateSubmission("this form was already submitted")
        if state is None:
            raise StaleForm("form token expired or unknown; reload the purchase page")

    def _consume_dedup(self, token: str) -> None:
        key = f"dedup:{token}"
        if not self.cache.compare_and_set(key, "unused", "consumed", ttl_ms=self.dedup_ttl_ms):
            self.check_dedup(token)
            raise DuplicateSubmission("this form was already submitted")

    # creation

    def passenger_digest(self, id_number: str) -> str:
        return hmac.new(self.field_key, id_number.encode("utf-8"), hashlib.sha256).hexdigest()

    def price(self, seat_type: str, legs: int, ticket_type: str) -> int:
        try:
            return int(self.fares[seat_type] * legs * TICKET_DISCOUNT[ticket_type])
        except KeyError as exc:
            raise ValueError(f"no fare for {exc.args[0]!r}") from None

    def _tables_for(self, order_no: str) -> tuple[str, str]:
        route = route_by_trailing_digits(order_no, self.topology)
        return route.table_name(ORDER_TABLE), route.table_name(ORDER_ITEM_TABLE)

    def create_order(
        self,
        user: User,
        allocation: Allocation,
        passengers: Sequence[Passenger],
        dedup: str,
    ) -> Order:
        if len(passengers) != len(allocation.seats):
            raise ValueError("one seat per passenger")
        for p in passengers:
            if p.ticket_type not in TICKET_DISCOUNT:
                raise ValueError(f"unknown ticket type {p.ticket_type!r}")
        legs = bin(allocation.legs).count("1")
        items = [
            OrderItem(
                passenger_id_number=encode_field(p.id_number, self.field_key).hex,
                passenger_name=encode_field(p.name, self.field_key).hex,
                seat=seat,
                ticket_type=p.ticket_type,
                price=self.price(seat.seat_type, legs, p.ticket_type),
            )
            for p, seat in zip(passengers, allocation.seats)
        ]
        self._consume_dedup(dedup)
        now = self.clock()
        order_no = order_number(self.ids.next_id(), user.user_id)
        key = allocation.key
        order = Order(
            order_no=order_no,
            user_id=user.user_id,
            username=user.username,
            train_id=allocation.train_id,
            service_date=allocation.service_date,
            segment=key,
            status=OrderStatus.PENDING_PAYMENT,
            created_at=now,
            deadline=now + self.payment_deadline_ms,
            items=items,
            allocation=allocation,
        )
        order_table, item_table = self._tables_for(order_no)
        mutations = [
            Mutation.insert(
                order_table,
                order_no,
                {
                    "user_id": user.user_id,
                    "username": user.username,
                    "train_id": allocation.train_id,
                    "service_date": allocation.service_date,
                    "departure": key.departure,
                    "arrival": key.arrival,
                    "seat_type": key.seat_type,
                    "status": order.status.value,
                    "created_at": now,
                    "deadline": order.deadline,
                    "allocation_id": allocation.allocation_id,
                    "legs": allocation.legs,
                    "item_count": len(items),
                    "amount": order.total_price,
                },
            )
        ]
        for i, item in enumerate(items):
            mutations.append(
                Mutation.insert(
                    item_table,
                    f"{order_no}:{i}",
                    {
                        "order_no": order_no,
                        "passenger_id_number": item.passenger_id_number,
                        "passenger_name": item.passenger_name,
                        "seat_id": item.seat.seat_id,
                        "carriage_no": item.seat.carriage_no,
                        "seat_no": item.seat.seat_no,
                        "seat_type": item.seat.seat_type,
                        "ticket_type": item.ticket_type,
                        "price": item.price,
                        "status": "LOCKED",
                    },
                )
            )
        for digest in sorted({self.passenger_digest(p.id_number) for p in passengers}):
            mutations.append(
                Mutation.insert(ROUTE_TABLE, f"{digest}:{order_no}", {"digest": digest, "order_no": order_no})
            )
        self.store.commit_with_change(mutations)
        order.history.append(order.status)
        with self._orders_lock:
            self._orders[order_no] = order
        with self._deadline_lock:
            heapq.heappush(self._deadlines, (order.deadline, order_no))
        return order

    def recover(self) -> int:
        """Reload orders from the sharded tables after a log replay.

        Pending and paid orders hand their seat allocations back to the
        inventory; pending ones are rescheduled for closing. Returns the
        number of orders loaded.
        """
        loaded = 0
        for route in self.topology.all_routes():
            order_table = route.table_name(ORDER_TABLE)
            item_rows = {r.primary_key: r.columns for r in self.store.rows(route.table_name(ORDER_ITEM_TABLE))}
            for row in self.store.rows(order_table):
                order_no, c = row.primary_key, row.columns
                with self._orders_lock:
                    if order_no in self._orders:
                        continue
                key = SegmentKey(c["departure"], c["arrival"], c["seat_type"])
                items = []
                for i in range(c["item_count"]):
                    ic = item_rows[f"{order_no}:{i}"]
                    items.append(
                        OrderItem(
                            passenger_id_number=ic["passenger_id_number"],
                            passenger_name=ic["passenger_name"],
                            seat=SeatAssignment(ic["seat_id"], ic["carriage_no"], ic["seat_no"], ic["seat_type"]),
                            ticket_type=ic["ticket_type"],
                            price=ic["price"],
                        )
                    )
                allocation = Allocation(
                    allocation_id=c["allocation_id"],
                    train_id=c["train_id"],
                    service_date=c["service_date"],
                    key=key,
                    legs=int(c["legs"]),
                    seats=tuple(i.seat for i in items),
                )
                order = Order(
                    order_no=order_no,
                    user_id=int(c["user_id"]),
                    username=c["username"],
                    train_id=c["train_id"],
                    service_date=c["service_date"],
                    segment=key,
                    status=OrderStatus(c["status"]),
                    created_at=int(c["created_at"]),
                    deadline=int(c["deadline"]),
                    items=items,
                    allocation=allocation,
                )
                order.history.append(order.status)
                if order.status in (OrderStatus.PENDING_PAYMENT, OrderStatus.PAID):
                    self.inventory.adopt(allocation)
                with self._orders_lock:
                    self._orders[order_no] = order
                if order.status is OrderStatus.PENDING_PAYMENT:
                    with self._deadline_lock:
                        heapq.heappush(self._deadlines, (order.deadline, order_no))
                loaded += 1
        return loaded

    # lookups

    def get(self, order_no: str) -> Order:
        with self._orders_lock:
            order = self._orders.get(order_no)
        if order is None:
            raise OrderNotFound(order_no)
        return order

    def orders(self) -> list[Order]:
        with self._orders_lock:
            return list(self._orders.values())

    # transitions

    def _set_status(self, order: Order, status: OrderStatus, item_status: str | None = None) -> None:
        if status not in TRANSITIONS[order.status]:
            raise InvalidTransition(f"{order.order_no}: {order.status.value} -> {status.value}")
        order_table, item_table = self._tables_for(order.order_no)
        mutations = [Mutation.update(order_table, order.order_no, {"status": status.value})]
        if item_status is not None:
            mutations += [
                Mutation.update(item_table, f"{order.order_no}:{i}", {"status": item_status})
                for i in range(len(order.items))
            ]
        self.store.commit_with_change(mutations)
        order.status = status
        order.history.append(status)

    def record_payment(self, order_no: str, callback_id: str) -> str:
        order = self.get(order_no)
        pay_id = str(self.ids.next_id())
        self.store.commit_with_change(
            [
                Mutation.insert(
                    PAY_TABLE,
                    pay_id,
                    {
                        "order_no": order_no,
                        "amount": order.total_price,
                        "callback_id": callback_id,
                        "created_at": self.clock(),
                    },
                )
            ]
        )
        return pay_id

    def payment_callback(self, order_no: str, success: bool, callback_id: str) -> OrderStatus:
        order = self.get(order_no)
        with order.lock:
            seen = self._callbacks.get(callback_id)
            if seen is not None:
                return seen
            if order.status is OrderStatus.PENDING_PAYMENT:
                if success:
                    self.inventory.confirm_seats(order.allocation)
                    self._set_status(order, OrderStatus.PAID, item_status="SOLD")
            elif success and order.status is not OrderStatus.PAID:
                log.warning("payment for %s arrived after it was %s", order_no, order.status.value)
                self.manual_refunds.append(order_no)
            self._callbacks[callback_id] = order.status
            return order.status

    def cancel_order(self, order_no: str, user: User) -> OrderStatus:
        order = self.get(order_no)
        if order.user_id != user.user_id:
            raise PermissionDenied(f"order {order_no} belongs to another user")
        with order.lock:
            if order.status is not OrderStatus.PENDING_PAYMENT:
                raise InvalidTransition(f"{order_no} is {order.status.value}")
            self.inventory.release_seats(order.allocation)
            self._set_status(order, OrderStatus.CANCELLED, item_status="RELEASED")
            return order.status

    def close_expired(self, now: int | None = None) -> list[str]:
        now = self.clock() if now is None else now
        due = []
        with self._deadline_lock:
            while self._deadlines and self._deadlines[0][0] <= now:
                due.append(heapq.heappop(self._deadlines)[1])
        closed = []
        for order_no in due:
            order = self.get(order_no)
            with order.lock:
                if order.status is not OrderStatus.PENDING_PAYMENT:
                    continue
                self.inventory.release_seats(order.allocation)
                self._set_status(order, OrderStatus.CLOSED, item_status="RELEASED")
                closed.append(order_no)
        return closed

    # passenger lookup

    def find_orders_by_passenger(self, id_number: str) -> list[dict]:
        digest = self.passenger_digest(id_number)
        routes = self.store.lookup(ROUTE_TABLE, "digest", digest)
        found = []
        for route in routes:
            order_no = route.columns["order_no"]
            order_table, item_table = self._tables_for(order_no)
            row = self.store.get(order_table, order_no)
            if row is None:
                continue
            cols = row.columns
            items = []
            for i in range(cols["item_count"]):
                item = self.store.get(item_table, f"{order_no}:{i}").columns
                items.append(
                    {
                        "passenger_name": mask_name(decode_field(item["passenger_name"], self.field_key)),
                        "id_number": mask_id_number(decode_field(item["passenger_id_number"], self.field_key)),
                        "carriage_no": item["carriage_no"],
                        "seat_no": item["seat_no"],
                        "seat_type": item["seat_type"],
                        "ticket_type": item["ticket_type"],
                        "price": item["price"],
                        "status": item["status"],
                    }
                )
            found.append(
                {
                    "order_no": order_no,
                    "train_id": cols["train_id"],
                    "service_date": cols["service_date"],
                    "departure": cols["departure"],
                    "arrival": cols["arrival"],
                    "seat_type": cols["seat_type"],
                    "status": cols["status"],
                    "created_at": cols["created_at"],
                    "items": items,
                }
            )
        found.sort(key=lambda o: (o["created_at"], int(o["order_no"])), reverse=True)
        return found


def order_summary(order: Order) -> dict:
    return {
        "order_no": order.order_no,
        "status": order.status.value,
        "train_id": order.train_id,
        "service_date": order.service_date,
        "departure": order.segment.departure,
        "arrival": order.segment.arrival,
        "seat_type": order.segment.seat_type,
        "amount": order.total_price,
        "deadline": order.deadline,
        "seats": [
            {"carriage_no": i.seat.carriage_no, "seat_no": i.seat.seat_no, "ticket_type": i.ticket_type}
            for i in order.items
        ],
    }
