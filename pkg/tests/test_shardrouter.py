import random
from collections import Counter

import pytest
from hypothesis import given, strategies as st

from railsale.errors import ConfigError, RoutingError
from railsale.orders import order_number
from railsale.shardrouter import (
    ShardRoute,
    ShardTopology,
    fnv1a_64,
    route_by_trailing_digits,
    route_by_user_id,
    route_by_username,
)

from . import oracles


@pytest.mark.parametrize(
    "data, digest",
    [
        (b"", 0xCBF29CE484222325),
        (b"a", 0xAF63DC4C8601EC8C),
        (b"foobar", 0x85944171F73967E8),
    ],
)
def test_fnv1a_published_vectors(data, digest):
    assert fnv1a_64(data) == digest
    assert oracles.fnv1a_64(data) == digest


@given(st.binary(max_size=64))
def test_fnv1a_matches_oracle(data):
    assert fnv1a_64(data) == oracles.fnv1a_64(data)


def test_topology_must_be_powers_of_two():
    with pytest.raises(ConfigError):
        ShardTopology(3, 4)
    with pytest.raises(ConfigError):
        ShardTopology(2, 0)
    assert len(ShardTopology(2, 8).all_routes()) == 16


def test_single_shard_always_zero():
    topo = ShardTopology(1, 1)
    assert route_by_username("anyone", topo) == ShardRoute(0, 0)
    assert route_by_trailing_digits("123456789", topo) == ShardRoute(0, 0)


def test_username_routing_deterministic():
    topo = ShardTopology(2, 16)
    assert route_by_username("alice", topo) == route_by_username("alice", topo)
    v = oracles.fnv1a_64(b"alice")
    assert route_by_username("alice", topo) == ShardRoute(v % 2, (v // 2) % 16)
    with pytest.raises(RoutingError):
        route_by_username("", topo)


def test_trailing_digit_examples():
    assert route_by_trailing_digits("88000007", ShardTopology(1, 16)) == ShardRoute(0, 7)
    # 999999 mod 4 = 3; 999999 // 4 = 249999; 249999 mod 8 = 7 (independent arithmetic)
    assert route_by_trailing_digits("12999999", ShardTopology(4, 8)) == ShardRoute(3, 7)
    assert route_by_trailing_digits("12999999", ShardTopology(4, 8)).table_name("t_order") == "t_order_3_7"
    for bad in ("12345", "abc123x56", "12345６"):
        with pytest.raises(RoutingError):
            route_by_trailing_digits(bad, ShardTopology(4, 8))


@given(st.integers(0, 2**62), st.integers(0, 2**40), st.sampled_from([(1, 1), (2, 4), (4, 8), (8, 16)]))
def test_orders_colocate_with_their_user(snowflake_id, user_id, shape):
    topo = ShardTopology(*shape)
    assert route_by_trailing_digits(order_number(snowflake_id, user_id), topo) == route_by_user_id(user_id, topo)


def test_username_balance_over_2x16():
    rng = random.Random(2024)
    topo = ShardTopology(2, 16)
    counts = Counter()
    alphabet = "abcdefghijklmnopqrstuvwxyz0123456789"
    for _ in range(1_000_000):
        name = "".join(rng.choices(alphabet, k=10))
        r = route_by_username(name, topo)
        counts[(r.db_index, r.table_index)] += 1
    expected = 1_000_000 / 32
    assert len(counts) == 32
    assert all(abs(c - expected) <= 0.1 * expected for c in counts.values())
