"""Deterministic placement of rows onto logical database/table shards.

Two routing rules are supported:

* username rows are placed by the 64-bit FNV-1a hash of the UTF-8 username;
* user-id / order-number rows are placed by the integer value of the key's
  last six decimal digits, so an order number that ends with its owner's id
  suffix lands next to that owner's other orders.

For either rule, with ``v`` the hash or digit value::

    db_index    = v mod db_count
    table_index = (v div db_count) mod tables_per_db

FNV-1a 64 test vectors: ``""`` -> ``0xcbf29ce484222325``,
``"a"`` -> ``0xaf63dc4c8601ec8c``, ``"foobar"`` -> ``0x85944171f73967e8``.
"""
from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError, RoutingError

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_MASK64 = 0xFFFF_FFFF_FFFF_FFFF


def fnv1a_64(data: bytes) -> int:
    h = FNV64_OFFSET
    for byte in data:
        h = ((h ^ byte) * FNV64_PRIME) & _MASK64
    return h


def _power_of_two(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


@dataclass(frozen=True)
class ShardTopology:
    db_count: int = 1
    tables_per_db: int = 1

    def __post_init__(self) -> None:
        if not (_power_of_two(self.db_count) and _power_of_two(self.tables_per_db)):
            raise ConfigError(
                f"shard counts must be powers of two, got {self.db_count}x{self.tables_per_db}"
            )

    def all_routes(self) -> list["ShardRoute"]:
        return [ShardRoute(d, t) for d in range(self.db_count) for t in range(self.tables_per_db)]


@dataclass(frozen=True)
class ShardRoute:
    db_index: int
    table_index: int

    def table_name(self, logical: str) -> str:
        return f"{logical}_{self.db_index}_{self.table_index}"


def _route(value: int, topology: ShardTopology) -> ShardRoute:
    return ShardRoute(
        value % topology.db_count,
        (value // topology.db_count) % topology.tables_per_db,
    )


def route_by_username(username: str, topology: ShardTopology) -> ShardRoute:
    if not username:
        raise RoutingError("username must be non-empty")
    return _route(fnv1a_64(username.encode("utf-8")), topology)


def route_by_trailing_digits(key: str | int, topology: ShardTopology) -> ShardRoute:
    text = str(key)
    tail = text[-6:]
    if len(tail) < 6 or not tail.isdigit() or not tail.isascii():
        raise RoutingError(f"key {text!r} does not end in six decimal digits")
    return _route(int(tail), topology)


def route_by_user_id(user_id: int, topology: ShardTopology) -> ShardRoute:
    """Route for a numeric user id; equals the route of any order number
    carrying the id's zero-padded six-digit suffix."""
    if user_id < 0:
        raise RoutingError("user ids are non-negative")
    return _route(user_id % 1_000_000, topology)
