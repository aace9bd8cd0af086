import pytest
from hypothesis import given, settings, strategies as st

from railsale.bloom import BloomFilter, BloomParams, predicted_fpr, size_for

from .oracles import bloom_fpr, bloom_size


@pytest.mark.parametrize(
    "n, p, m, k",
    [
        # frozen from the mpmath oracle at 50 digits
        (1_000_000, 0.01, 9_585_059, 7),
        (1, 0.5, 2, 1),
        (100_000, 0.01, 958_506, 7),
        (10_000, 1e-6, 287_552, 20),
        (1, 0.999, 1, 1),
    ],
)
def test_size_for_frozen_values(n, p, m, k):
    assert bloom_size(n, p) == (m, k)
    assert size_for(n, p) == BloomParams(n, p, m, k)


@given(st.integers(1, 10**7), st.floats(1e-9, 0.9))
def test_size_for_matches_oracle(n, p):
    params = size_for(n, p)
    assert (params.m, params.k) == bloom_size(n, repr(p))
    assert predicted_fpr(params.m, params.k, n) <= 1.2 * p


@pytest.mark.parametrize("n, p", [(0, 0.1), (10, 0.0), (10, 1.0), (10, -0.5)])
def test_size_for_rejects(n, p):
    with pytest.raises(ValueError):
        size_for(n, p)


def test_predicted_fpr_values():
    assert predicted_fpr(100, 3, 0) == 0
    # frozen from the mpmath oracle; the rounded figure usually quoted is about 0.0101
    assert bloom_fpr(9_585_059, 7, 1_000_000) == pytest.approx(0.0100392145592539, rel=1e-12)
    assert predicted_fpr(9_585_059, 7, 1_000_000) == pytest.approx(0.0100392145592539, rel=1e-9)
    assert predicted_fpr(1000, 1, 1000) == pytest.approx(0.632120558828558, rel=1e-12)


def test_fresh_filter_contains_nothing():
    bf = BloomFilter.for_capacity(1000, 0.01)
    assert not any(bf.maybe_contains(f"k{i}") for i in range(1000))
    assert bf.popcount() == 0


def test_insert_then_contains_and_idempotent():
    bf = BloomFilter.for_capacity(1000, 0.01)
    bf.insert("alice")
    assert "alice" in bf
    before = bf.snapshot()
    bf.insert("alice")
    assert bf.snapshot() == before


def test_str_and_bytes_keys_agree():
    bf = BloomFilter.for_capacity(100, 0.01)
    assert bf.positions("zé") == bf.positions("zé".encode())


def test_popcount_bound_and_no_false_negatives():
    bf = BloomFilter.for_capacity(100_000, 0.01)
    keys = [f"user-{i}" for i in range(100_000)]
    for key in keys:
        bf.insert(key)
    assert bf.popcount() <= 100_000 * bf.params.k
    assert all(bf.maybe_contains(key) for key in keys)


def test_measured_fpr_near_prediction():
    n = 20_000
    bf = BloomFilter.for_capacity(n, 0.01)
    for i in range(n):
        bf.insert(f"in-{i}")
    fp = sum(bf.maybe_contains(f"out-{i}") for i in range(50_000)) / 50_000
    predicted = predicted_fpr(bf.params.m, bf.params.k, n)
    assert predicted / 2 <= fp <= predicted * 2


@settings(max_examples=50)
@given(st.lists(st.binary(max_size=20), max_size=50))
def test_bits_only_grow(keys):
    bf = BloomFilter.for_capacity(64, 0.05)
    prev = bf.snapshot()
    for key in keys:
        bf.insert(key)
        cur = bf.snapshot()
        assert all((a & b) == a for a, b in zip(prev, cur))
        assert bf.maybe_contains(key)
        prev = cur
