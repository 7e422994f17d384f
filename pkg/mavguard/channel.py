"""Bounded single-producer/single-consumer frame ring.

The ring is the only path between the untrusted and the trusted partition.
Storage is one fixed numpy byte array of ``capacity`` slots, each a 2-byte
little-endian length prefix followed by up to ``slot_size`` frame bytes.
``head`` counts published slots and is written only by the producer; ``tail``
counts consumed slots and is written only by the consumer. A slot's bytes and
length prefix are written before ``head`` moves, so the consumer never sees a
partial frame.
"""
import threading
import time
from enum import Enum
from typing import Optional, Tuple

import numpy as np

from mavguard.codec import MAX_FRAME_LEN

DEFAULT_SLOT_SIZE = 300


class InvalidCapacity(ValueError):
    pass


class FrameTooLarge(ValueError):
    pass


class EndpointOwnershipError(RuntimeError):
    pass


class PushResult(Enum):
    OK = "ok"
    FULL = "full"


class RingChannel:
    def __init__(self, capacity: int, slot_size: int = DEFAULT_SLOT_SIZE):
        if capacity < 2 or capacity & (capacity - 1):
            raise InvalidCapacity(f"capacity must be a power of two >= 2, got {capacity}")
        if slot_size < MAX_FRAME_LEN or slot_size > 0xFFFF:
            raise ValueError(f"slot_size must be between {MAX_FRAME_LEN} and 65535, got {slot_size}")
        self.capacity = capacity
        self.slot_size = slot_size
        self.storage = np.zeros((capacity, slot_size + 2), dtype=np.uint8)
        self._mask = capacity - 1
        self.head = 0
        self.tail = 0

    def __len__(self) -> int:
        return self.head - self.tail

    def _write(self, frame: bytes) -> PushResult:
        size = len(frame)
        if size > self.slot_size:
            raise FrameTooLarge(f"{size}-byte frame exceeds slot size {self.slot_size}")
        head = self.head
        if head - self.tail >= self.capacity:
            return PushResult.FULL
        slot = self.storage[head & self._mask]
        slot[2 : 2 + size] = np.frombuffer(frame, dtype=np.uint8)
        slot[1] = size >> 8
        slot[0] = size & 0xFF
        self.head = head + 1
        return PushResult.OK

    def _read(self) -> Optional[bytes]:
        tail = self.tail
        if tail == self.head:
            return None
        slot = self.storage[tail & self._mask]
        size = int(slot[0]) | (int(slot[1]) << 8)
        frame = slot[2 : 2 + size].tobytes()
        self.tail = tail + 1
        return frame


class _Endpoint:
    """One side of a ring, usable from a single thread at a time.

    The first call binds the endpoint to the calling thread; ``release`` hands
    it over to another thread.
    """

    def __init__(self, ring: RingChannel):
        self._ring = ring
        self._owner: Optional[int] = None

    def _claim(self) -> None:
        ident = threading.get_ident()
        if self._owner is None:
            self._owner = ident
        elif self._owner != ident:
            raise EndpointOwnershipError(f"{type(self).__name__} is owned by another thread")

    def release(self) -> None:
        self._owner = None

    @property
    def capacity(self) -> int:
        return self._ring.capacity

    def __len__(self) -> int:
        return len(self._ring)


class Producer(_Endpoint):
    def push(self, frame: bytes) -> PushResult:
        self._claim()
        return self._ring._write(frame)

    def push_blocking(self, frame: bytes, backoff: "Backoff", stop: Optional[threading.Event] = None) -> bool:
        """Retry until the frame is queued; False if ``stop`` was set first."""
        backoff.reset()
        while self.push(frame) is PushResult.FULL:
            if stop is not None and stop.is_set():
                return False
            backoff.wait()
        return True


class Consumer(_Endpoint):
    def pop(self) -> Optional[bytes]:
        """Oldest unread frame, or ``None`` when the ring is empty."""
        self._claim()
        return self._ring._read()

    def pop_blocking(self, backoff: "Backoff", stop: Optional[threading.Event] = None) -> Optional[bytes]:
        backoff.reset()
        while True:
            frame = self.pop()
            if frame is not None:
                return frame
            if stop is not None and stop.is_set():
                return None
            backoff.wait()


def ring_create(capacity: int, slot_size: int = DEFAULT_SLOT_SIZE) -> Tuple[Producer, Consumer]:
    ring = RingChannel(capacity, slot_size)
    return Producer(ring), Consumer(ring)


class Backoff:
    """Spin-then-sleep waiting used by every busy-wait loop."""

    def __init__(self, spins: int = 1000, sleep_us: float = 50):
        self.spins = spins
        self.sleep_us = sleep_us
        self._idle = 0

    def reset(self) -> None:
        self._idle = 0

    def next_delay(self) -> float:
        """Seconds the next ``wait`` will sleep (0 while still spinning)."""
        if self._idle < self.spins:
            return 0.0
        return self.sleep_us / 1e6

    def wait(self) -> None:
        delay = self.next_delay()
        self._idle += 1
        # sleep(0) yields the GIL to the other partition while spinning
        time.sleep(delay)
