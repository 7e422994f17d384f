import random
import threading
from collections import deque

import pytest

from mavguard.channel import (
    Backoff,
    EndpointOwnershipError,
    FrameTooLarge,
    InvalidCapacity,
    PushResult,
    ring_create,
)


def test_empty_ring_pops_nothing():
    producer, consumer = ring_create(64)
    assert consumer.pop() is None
    assert len(consumer) == 0
    assert producer.capacity == 64


@pytest.mark.parametrize("capacity", [0, 1, 3, 100])
def test_capacity_must_be_power_of_two(capacity):
    with pytest.raises(InvalidCapacity):
        ring_create(capacity)


def test_slot_size_must_hold_a_frame():
    with pytest.raises(ValueError):
        ring_create(4, slot_size=100)


def test_full_ring():
    producer, consumer = ring_create(2)
    assert producer.push(b"A") is PushResult.OK
    assert producer.push(b"B") is PushResult.OK
    assert producer.push(b"C") is PushResult.FULL
    assert consumer.pop() == b"A"
    assert producer.push(b"C") is PushResult.OK
    assert [consumer.pop(), consumer.pop(), consumer.pop()] == [b"B", b"C", None]


def test_frame_sizes():
    producer, consumer = ring_create(4)
    big = bytes(range(256)) + bytes(24)
    assert producer.push(big) is PushResult.OK
    with pytest.raises(FrameTooLarge):
        producer.push(bytes(301))
    assert producer.push(b"") is PushResult.OK
    assert consumer.pop() == big
    assert consumer.pop() == b""


def test_frame_too_large_even_when_full():
    producer, _ = ring_create(2)
    producer.push(b"1")
    producer.push(b"2")
    with pytest.raises(FrameTooLarge):
        producer.push(bytes(400))


def test_endpoints_belong_to_one_thread():
    producer, consumer = ring_create(4)
    producer.push(b"x")
    errors = []

    def steal():
        try:
            producer.push(b"y")
        except EndpointOwnershipError as e:
            errors.append(e)

    thread = threading.Thread(target=steal)
    thread.start()
    thread.join()
    assert len(errors) == 1

    producer.release()
    thread = threading.Thread(target=lambda: producer.push(b"z"))
    thread.start()
    thread.join()
    assert consumer.pop() == b"x"
    assert consumer.pop() == b"z"


def test_random_interleaving_matches_queue():
    rng = random.Random(17)
    producer, consumer = ring_create(8)
    oracle = deque()
    for i in range(20_000):
        if rng.random() < 0.55:
            frame = bytes([i & 0xFF]) * rng.randint(0, 280)
            result = producer.push(frame)
            assert (result is PushResult.FULL) == (len(oracle) == 8)
            if result is PushResult.OK:
                oracle.append(frame)
        else:
            expected = oracle.popleft() if oracle else None
            assert consumer.pop() == expected


def test_backoff_spins_then_sleeps():
    backoff = Backoff(spins=2, sleep_us=50)
    assert backoff.next_delay() == 0.0
    backoff.wait()
    backoff.wait()
    assert backoff.next_delay() == pytest.approx(50e-6)
    backoff.reset()
    assert backoff.next_delay() == 0.0


def test_blocking_push_and_pop_honour_stop():
    producer, consumer = ring_create(2)
    stop = threading.Event()
    stop.set()
    producer.push(b"1")
    producer.push(b"2")
    assert producer.push_blocking(b"3", Backoff(spins=0, sleep_us=1), stop) is False
    assert consumer.pop_blocking(Backoff(), stop) == b"1"
    assert consumer.pop_blocking(Backoff(), stop) == b"2"
    assert consumer.pop_blocking(Backoff(spins=0, sleep_us=1), stop) is None


def _frame(i: int) -> bytes:
    return i.to_bytes(4, "little") * (1 + i % 60)


def _stress(count: int, spins: int, sleep_us: float) -> None:
    producer, consumer = ring_create(64)
    stop = threading.Event()
    received = []
    errors = []

    def produce():
        try:
            backoff = Backoff(spins, sleep_us)
            for i in range(count):
                producer.push_blocking(_frame(i), backoff)
        except Exception as e:  # surfaced by the assertion below
            errors.append(e)

    def consume():
        try:
            backoff = Backoff(spins, sleep_us)
            while len(received) < count:
                frame = consumer.pop_blocking(backoff, stop)
                if frame is None:
                    return
                received.append(frame)
        except Exception as e:
            errors.append(e)

    threads = [threading.Thread(target=produce), threading.Thread(target=consume)]
    for thread in threads:
        thread.start()
    threads[0].join(120)
    threads[1].join(120)
    stop.set()
    assert errors == []
    assert len(received) == count
    for i, frame in enumerate(received):
        assert frame == _frame(i), f"frame {i} out of order or corrupted"
    assert len(consumer) == 0


def test_concurrent_transfer():
    _stress(10_000, spins=100, sleep_us=10)


@pytest.mark.slow
@pytest.mark.parametrize("round_", range(20))
def test_concurrent_stress(round_):
    rng = random.Random(round_)
    _stress(100_000, spins=rng.randint(0, 2000), sleep_us=rng.choice([0, 1, 10, 50, 100]))
