import random
import threading

import pytest
from hypothesis import given, strategies as st

from railsale.errors import CacheTypeError
from railsale.kvcache import KVCache


class Clock:
    def __init__(self, t=0.0):
        self.t = t

    def __call__(self):
        return self.t


@pytest.fixture
def clock():
    return Clock(1000.0)


@pytest.fixture
def cache(clock):
    return KVCache(clock=clock)


def test_set_get_and_missing(cache):
    assert cache.get("k") is None
    cache.set("k", "v")
    assert cache.get("k") == "v"


def test_ttl_expiry_boundary_is_closed(cache, clock):
    cache.set("k", "v", ttl_ms=50)
    clock.t += 49
    assert cache.get("k") == "v"
    clock.t += 1
    assert cache.get("k") is None
    cache.set("k2", "v", ttl_ms=50)
    clock.t += 100
    assert not cache.exists("k2")


def test_overwrite_resets_ttl(cache, clock):
    cache.set("k", "a", ttl_ms=50)
    clock.t += 40
    cache.set("k", "b")
    clock.t += 1000
    assert cache.get("k") == "b"


def test_compare_and_set(cache):
    assert cache.compare_and_set("k", None, "x")
    assert not cache.compare_and_set("k", None, "y")
    assert cache.compare_and_set("k", "x", "y")
    assert cache.get("k") == "y"


def test_type_errors(cache):
    cache.hset("h", "f", 1)
    cache.set("s", "v")
    with pytest.raises(CacheTypeError):
        cache.get("h")
    with pytest.raises(CacheTypeError):
        cache.hget("s", "f")
    with pytest.raises(CacheTypeError):
        cache.hincr_if_at_least("s", "f", 0, -1)


def test_hash_commands(cache):
    cache.hset_many("h", {"a": 1, "b": 2})
    assert cache.hgetall("h") == {"a": 1, "b": 2}
    assert cache.hincrby("h", "a", 5) == 6
    assert cache.hincrby("h", "new", -1) == -1
    assert cache.hdel("h", "a", "b", "new", "missing") == 3
    assert not cache.exists("h")
    assert cache.hgetall("h") == {}


def test_hincr_if_at_least_cases(cache):
    cache.hset("h", "f", 5)
    assert cache.hincr_if_at_least("h", "f", 0, -2) == 3
    assert cache.hincr_if_at_least("h", "f", 0, -4) is None
    assert cache.hget("h", "f") == 3
    assert cache.hincr_if_at_least("h", "absent", 0, -1) is None
    assert cache.hget("h", "absent") is None
    assert cache.hincr_if_at_least("nothing", "f", 0, -1) is None
    assert not cache.exists("nothing")


def test_expire_sweep(cache, clock):
    assert cache.expire_sweep() == 0
    for k in "abc":
        cache.set(k, "v", ttl_ms=10)
    cache.set("keep", "v")
    clock.t += 10
    assert cache.expire_sweep() == 3
    assert cache.expire_sweep() == 0
    assert cache.keys() == ["keep"]


def test_expire_and_keys_prefix(cache, clock):
    cache.set("user:a", "1")
    cache.set("user:b", "2")
    cache.set("train:x", "3")
    assert sorted(cache.keys("user:")) == ["user:a", "user:b"]
    assert cache.expire("user:a", 5)
    assert not cache.expire("nope", 5)
    clock.t += 5
    assert cache.keys("user:") == ["user:b"]


def test_last_token_race_has_exactly_one_winner():
    cache = KVCache()
    for _ in range(10_000):
        cache.hset("t", "f", 1)
        results = []
        barrier = threading.Barrier(2)

        def take():
            barrier.wait()
            results.append(cache.hincr_if_at_least("t", "f", 0, -1))

        threads = [threading.Thread(target=take) for _ in range(2)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert sorted(results, key=lambda r: r is None) == [0, None]


def test_sum_conservation_under_concurrency():
    cache = KVCache()
    cache.hset("t", "f", 300)
    applied = []
    lock = threading.Lock()

    def worker(seed):
        rng = random.Random(seed)
        local = []
        for _ in range(2_000):
            delta = rng.choice([-3, -2, -1, 1, 2])
            if delta < 0:
                if cache.hincr_if_at_least("t", "f", 0, delta) is not None:
                    local.append(delta)
            else:
                cache.hincrby("t", "f", delta)
                local.append(delta)
            assert int(cache.hget("t", "f")) >= 0
        with lock:
            applied.extend(local)

    threads = [threading.Thread(target=worker, args=(s,)) for s in range(6)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert cache.hget("t", "f") == 300 + sum(applied)


@given(st.lists(st.tuples(st.integers(0, 10), st.integers(-5, 5)), max_size=60), st.integers(0, 20))
def test_floor_never_crossed(ops, start):
    cache = KVCache()
    cache.hset("h", "f", start)
    model = start
    for floor, delta in ops:
        result = cache.hincr_if_at_least("h", "f", floor, delta)
        if model + delta >= floor:
            model += delta
            assert result == model
        else:
            assert result is None
        assert cache.hget("h", "f") == model
