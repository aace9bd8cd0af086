import threading

from hypothesis import given, settings, strategies as st

from railsale.mqbus import MessageBus


class Clock:
    def __init__(self):
        self.t = 0.0

    def __call__(self):
        return self.t


def test_offsets_start_at_zero_in_order():
    bus = MessageBus()
    assert bus.publish("t", "a") == 0
    assert bus.publish("t", "b") == 1
    assert bus.publish("other", "c") == 0


def test_empty_topic_poll():
    assert MessageBus().poll("t", "g") == []


def test_unacked_message_is_redelivered_after_timeout():
    clock = Clock()
    bus = MessageBus(clock)
    bus.publish("t", "m")
    assert [m.payload for m in bus.poll("t", "g", visibility_timeout_ms=100)] == ["m"]
    assert bus.poll("t", "g", visibility_timeout_ms=100) == []
    clock.t += 100
    again = bus.poll("t", "g", visibility_timeout_ms=100)
    assert [m.payload for m in again] == ["m"]
    assert bus.deliveries("t", "g") == 2


def test_groups_fan_out():
    bus = MessageBus()
    bus.publish("t", "m")
    assert len(bus.poll("t", "g1")) == 1
    assert len(bus.poll("t", "g2")) == 1


def test_ack_semantics():
    clock = Clock()
    bus = MessageBus(clock)
    for p in "abc":
        bus.publish("t", p)
    msgs = bus.poll("t", "g", visibility_timeout_ms=10)
    bus.ack("t", "g", msgs[2].offset)
    bus.ack("t", "g", msgs[2].offset)  # double ack is a no-op
    assert bus.pending("t", "g") == 2
    clock.t += 10
    assert [m.payload for m in bus.poll("t", "g")] == ["a", "b"]  # later ack did not cover earlier
    bus.ack("t", "g", 0)
    bus.ack("t", "g", 1)
    assert bus.pending("t", "g") == 0
    clock.t += 1e9
    assert bus.poll("t", "g") == []


def test_concurrent_publish_offsets_are_dense():
    bus = MessageBus()
    got = []
    lock = threading.Lock()

    def work(i):
        mine = [bus.publish("t", f"{i}-{j}") for j in range(2_500)]
        with lock:
            got.extend(mine)

    threads = [threading.Thread(target=work, args=(i,)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert sorted(got) == list(range(10_000))


def test_wait_for_messages():
    bus = MessageBus()
    assert not bus.wait_for_messages("t", "g", timeout_s=0.01)
    threading.Timer(0.02, bus.publish, args=("t", "x")).start()
    assert bus.wait_for_messages("t", "g", timeout_s=5)


@settings(max_examples=60)
@given(st.integers(1, 30), st.lists(st.tuples(st.booleans(), st.integers(0, 29)), max_size=80))
def test_at_least_once_and_in_order(n, script):
    """Whatever mix of polls, dropped acks and clock jumps, every message is
    eventually delivered, and each poll returns offsets in ascending order."""
    clock = Clock()
    bus = MessageBus(clock)
    for i in range(n):
        bus.publish("t", str(i))
    delivered = set()
    for advance, drop in script:
        if advance:
            clock.t += 50
        batch = bus.poll("t", "g", max_messages=7, visibility_timeout_ms=50)
        offsets = [m.offset for m in batch]
        assert offsets == sorted(offsets)
        for m in batch:
            delivered.add(m.offset)
            if m.offset != drop:
                bus.ack("t", "g", m.offset)
    # drain
    for _ in range(n + 2):
        clock.t += 50
        for m in bus.poll("t", "g", visibility_timeout_ms=50):
            delivered.add(m.offset)
            bus.ack("t", "g", m.offset)
    assert delivered == set(range(n))
    assert bus.pending("t", "g") == 0
