"""Buffered IPC channels.

Ring channels (one producer, many consumers) live in a shared-memory file and
are synchronized only by byte-range locks on that file, one lock byte per
slot. Open-file-description locks are used so that two handles in the same
process contend exactly like two processes would.

Producer protocol (lock-ahead): the producer always holds the exclusive lock
of the slot it will write next. ``produce(n)`` first takes the exclusive lock
on slot ``(n+1) mod N``, then writes slot ``n mod N`` and finally releases it.
A reader still holding ``(n+1) mod N`` therefore stalls the producer before
it touches any slot.

Consumer protocol: take the shared lock on slot ``n mod N``, check the header,
copy the payload out. A pinned consumer keeps the shared lock of the slot it
read last until it holds the next one, which caps its lag at ``N - 1`` and
throttles the producer to the slowest pinned consumer. A new consumer pins
the slot just before its start iteration when it opens. With ``N = 2``
there is no slot to spare for a pin, so readers never pin and a fast producer
can lap them; that shows up as :class:`LagFault`.

The combine channel collects per-sampler token frames arriving over byte
streams and releases an iteration only when every sampler has reported.
"""

from __future__ import annotations

import errno
import fcntl
import mmap
import os
import random
import struct
import tempfile
import threading
import time
from dataclasses import dataclass, field
from typing import Optional

F_OFD_GETLK = getattr(fcntl, "F_OFD_GETLK", 36)
F_OFD_SETLK = getattr(fcntl, "F_OFD_SETLK", 37)
F_OFD_SETLKW = getattr(fcntl, "F_OFD_SETLKW", 38)
_FLOCK = "hhqqi4x"  # l_type, l_whence, l_start, l_len, l_pid

MAGIC = b"BICR"
LAYOUT_VERSION = 1
REGION = struct.Struct("<4sHHIIQQ")   # magic, version, flags, n_slots, capacity, stride, created_ns
SLOT = struct.Struct("<QII")          # iteration, payload length, generation
REGION_SIZE = 64
ALIGN = 64
DEFAULT_SLOTS = 8
MAX_BACKOFF = 1e-3


class ChannelError(Exception):
    pass


class LagFault(ChannelError):
    """A consumer fell at least one full ring behind the producer."""


class ProtocolFault(ChannelError):
    pass


class LockTimeout(ChannelError):
    pass


def shm_dir() -> str:
    return "/dev/shm" if os.path.isdir("/dev/shm") else tempfile.gettempdir()


def region_path(name: str) -> str:
    if not name or "/" in name:
        raise ValueError(f"invalid channel name {name!r}")
    return os.path.join(shm_dir(), f"bic.{name}")


def slot_stride(capacity: int) -> int:
    return (SLOT.size + capacity + ALIGN - 1) // ALIGN * ALIGN


def slot_offset(index: int, capacity: int) -> int:
    return REGION_SIZE + index * slot_stride(capacity)


class _Locks:
    """Per-slot byte-range locks on one open file description."""

    def __init__(self, fd: int):
        self.fd = fd

    def _op(self, cmd: int, kind: int, slot: int):
        fcntl.fcntl(self.fd, cmd, struct.pack(_FLOCK, kind, os.SEEK_SET, slot, 1, 0))

    def acquire(self, slot: int, exclusive: bool, timeout: Optional[float] = None,
                check=None) -> None:
        """Block until granted. With a ``timeout`` or a ``check`` callback the
        lock is polled with capped exponential backoff and ``check`` runs
        between attempts so it can abort the wait by raising."""
        kind = fcntl.F_WRLCK if exclusive else fcntl.F_RDLCK
        if timeout is None and check is None:
            while True:
                try:
                    self._op(F_OFD_SETLKW, kind, slot)
                    return
                except InterruptedError:
                    continue
        deadline = float("inf") if timeout is None else time.monotonic() + timeout
        delay = 1e-5
        while True:
            try:
                self._op(F_OFD_SETLK, kind, slot)
                return
            except OSError as exc:
                if exc.errno not in (errno.EAGAIN, errno.EACCES):
                    raise
            if check is not None:
                check()
            if time.monotonic() >= deadline:
                raise LockTimeout(f"slot {slot} lock not granted within {timeout}s")
            time.sleep(delay)
            delay = min(delay * 2, MAX_BACKOFF)

    def release(self, slot: int) -> None:
        self._op(F_OFD_SETLK, fcntl.F_UNLCK, slot)


class _Handle:
    def __init__(self, name: str, fd: int):
        self.name = name
        self.path = region_path(name)
        self._fd = fd
        self._map = mmap.mmap(fd, 0)
        magic, version, _flags, n, cap, stride, _ = REGION.unpack_from(self._map, 0)
        if magic != MAGIC or version != LAYOUT_VERSION:
            raise ChannelError(f"{self.path} is not a v{LAYOUT_VERSION} ring region")
        self.n_slots, self.capacity, self.stride = n, cap, stride
        self.locks = _Locks(fd)

    def _header(self, slot: int) -> tuple:
        return SLOT.unpack_from(self._map, REGION_SIZE + slot * self.stride)

    def close(self) -> None:
        if self._fd >= 0:
            self._map.close()
            os.close(self._fd)  # drops every lock held by this description
            self._fd = -1

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class RingProducer(_Handle):
    """The single writer of a ring channel."""

    def __init__(self, name: str, fd: int):
        super().__init__(name, fd)
        self.next_iteration = 0
        self.held: set = set()
        self.phase = "idle"
        self.locks.acquire(0, exclusive=True)
        self.held.add(0)

    def produce(self, iteration: int, payload, timeout: Optional[float] = None) -> None:
        if iteration != self.next_iteration:
            raise ProtocolFault(f"expected iteration {self.next_iteration}, got {iteration}")
        if len(payload) > self.capacity:
            raise ValueError(f"payload of {len(payload)} bytes exceeds slot capacity {self.capacity}")
        slot = iteration % self.n_slots
        ahead = (iteration + 1) % self.n_slots
        assert slot in self.held
        self.phase = "lock_ahead"
        self.locks.acquire(ahead, exclusive=True, timeout=timeout)
        self.held.add(ahead)
        self.phase = "write"
        base = REGION_SIZE + slot * self.stride
        self._map[base + SLOT.size:base + SLOT.size + len(payload)] = payload
        SLOT.pack_into(self._map, base, iteration, len(payload), iteration // self.n_slots + 1)
        self.locks.release(slot)
        self.held.discard(slot)
        self.phase = "idle"
        self.next_iteration += 1

    def unlink(self) -> None:
        try:
            os.unlink(self.path)
        except FileNotFoundError:
            pass


class RingConsumer(_Handle):
    """One reader of a ring channel; reads iterations in order from ``start``."""

    def __init__(self, name: str, fd: int, start: int = 0, pin: bool = True):
        super().__init__(name, fd)
        self.next_iteration = start
        self.pin = pin and self.n_slots > 2
        self.pinned: Optional[int] = None
        if self.pin:
            prev = (start - 1) % self.n_slots
            try:
                self.locks.acquire(prev, exclusive=False, timeout=0)
                self.pinned = prev
            except LockTimeout:
                pass  # the producer is about to write it; start unpinned

    def _drop_pin(self):
        if self.pinned is not None:
            self.locks.release(self.pinned)
            self.pinned = None

    def consume(self, iteration: Optional[int] = None, timeout: Optional[float] = None) -> bytes:
        n = self.next_iteration if iteration is None else iteration
        if n < self.next_iteration:
            raise ProtocolFault(f"iteration {n} already consumed")
        slot = n % self.n_slots
        if self.pinned == slot:
            self._drop_pin()
        deadline = None if timeout is None else time.monotonic() + timeout
        delay = 1e-5
        want_gen = n // self.n_slots + 1
        def lapped():
            # generations only grow, so an unlocked peek is enough to detect a lap
            # even while the producer holds this slot for a later iteration
            if self._header(slot)[2] > want_gen:
                self._drop_pin()
                raise LagFault(f"wanted iteration {n}, slot {slot} was overwritten")

        while True:
            lapped()
            left = None if deadline is None else max(0.0, deadline - time.monotonic())
            self.locks.acquire(slot, exclusive=False, timeout=left,
                               check=None if self.pin else lapped)
            it, length, gen = self._header(slot)
            if gen == want_gen and it == n:
                base = REGION_SIZE + slot * self.stride + SLOT.size
                data = bytes(self._map[base:base + length])
                if self.pin:
                    self._drop_pin()
                    self.pinned = slot
                else:
                    self.locks.release(slot)
                self.next_iteration = n + 1
                return data
            self.locks.release(slot)
            if gen > want_gen or (gen == want_gen and it > n):
                self._drop_pin()
                raise LagFault(f"wanted iteration {n}, slot {slot} already holds {it}")
            if deadline is not None and time.monotonic() >= deadline:
                raise LockTimeout(f"iteration {n} not produced within {timeout}s")
            time.sleep(delay)
            delay = min(delay * 2, MAX_BACKOFF)

    def close(self) -> None:
        self.pinned = None
        super().close()


def create(name: str, n_slots: int = DEFAULT_SLOTS, capacity: int = 4096) -> RingProducer:
    if n_slots < 2:
        raise ValueError("a ring needs at least 2 slots")
    if capacity <= 0:
        raise ValueError("slot capacity must be positive")
    path = region_path(name)
    try:
        fd = os.open(path, os.O_RDWR | os.O_CREAT | os.O_EXCL, 0o600)
    except FileExistsError:
        raise ChannelError(f"channel {name!r} already exists at {path}") from None
    stride = slot_stride(capacity)
    os.ftruncate(fd, REGION_SIZE + n_slots * stride)
    with mmap.mmap(fd, 0) as m:
        REGION.pack_into(m, 0, MAGIC, LAYOUT_VERSION, 0, n_slots, capacity, stride, time.time_ns())
    return RingProducer(name, fd)


def open_consumer(name: str, start: int = 0, pin: bool = True) -> RingConsumer:
    fd = os.open(region_path(name), os.O_RDWR)
    return RingConsumer(name, fd, start=start, pin=pin)


def unlink(name: str) -> None:
    try:
        os.unlink(region_path(name))
    except FileNotFoundError:
        pass


def unique_name(prefix: str = "ch") -> str:
    return f"{prefix}-{os.getpid()}-{random.getrandbits(40):010x}"


# -- combine channel -------------------------------------------------------------

FRAME_HEAD = struct.Struct("<QHH")
FRAME_ENTRY = struct.Struct("<QI")


def encode_tokens(iteration: int, sampler_index: int, tokens) -> bytes:
    """``tokens`` is an iterable of ``(seq_id, token_id)`` pairs."""
    tokens = list(tokens)
    if len(tokens) > 0xFFFF:
        raise ValueError("at most 65535 tokens per frame")
    return FRAME_HEAD.pack(iteration, sampler_index, len(tokens)) + \
        b"".join(FRAME_ENTRY.pack(s, t) for s, t in tokens)


def decode_tokens(frame: bytes) -> tuple:
    iteration, index, count = FRAME_HEAD.unpack_from(frame, 0)
    if len(frame) != FRAME_HEAD.size + FRAME_ENTRY.size * count:
        raise ProtocolFault(f"frame length {len(frame)} does not match count {count}")
    tokens = [FRAME_ENTRY.unpack_from(frame, FRAME_HEAD.size + i * FRAME_ENTRY.size) for i in range(count)]
    return iteration, index, tokens


def read_frame(stream) -> bytes:
    head = stream.read_exact(FRAME_HEAD.size)
    count = FRAME_HEAD.unpack(head)[2]
    return head + stream.read_exact(FRAME_ENTRY.size * count) if count else head


def bico_submit(stream, iteration: int, sampler_index: int, tokens) -> None:
    stream.write(encode_tokens(iteration, sampler_index, tokens), "tokens")


@dataclass
class CombineSlot:
    iteration: int
    ready: list
    tokens: list = field(default_factory=list)

    def complete(self) -> bool:
        return all(self.ready)


class Collector:
    """The scheduler's end of the combine channel.

    Holds ``n_slots`` slots of ``samplers`` subslots each. A frame for an
    iteration that would reuse a slot still awaiting collection blocks in
    ``feed`` until that slot is recycled.
    """

    def __init__(self, samplers: int, n_slots: int = DEFAULT_SLOTS):
        if samplers < 1 or n_slots < 1:
            raise ValueError("samplers and n_slots must be >= 1")
        self.samplers = samplers
        self.n_slots = n_slots
        self.next_collect = 0
        self.slots: list = [None] * n_slots
        self._cond = threading.Condition()
        self.faults = 0

    def feed(self, frame: bytes, timeout: Optional[float] = None) -> None:
        iteration, index, tokens = decode_tokens(frame)
        if index >= self.samplers:
            raise ProtocolFault(f"sampler index {index} out of range")
        with self._cond:
            if iteration < self.next_collect:
                self.faults += 1
                raise ProtocolFault(f"iteration {iteration} already collected")
            if not self._cond.wait_for(lambda: iteration < self.next_collect + self.n_slots, timeout):
                raise LockTimeout(f"no free slot for iteration {iteration}")
            k = iteration % self.n_slots
            slot = self.slots[k]
            if slot is None or slot.iteration != iteration:
                slot = self.slots[k] = CombineSlot(iteration, [False] * self.samplers)
            if slot.ready[index]:
                self.faults += 1
                raise ProtocolFault(f"duplicate frame for iteration {iteration} sampler {index}")
            slot.tokens.extend(tokens)
            slot.ready[index] = True
            self._cond.notify_all()

    def collect(self, iteration: Optional[int] = None, timeout: Optional[float] = None) -> dict:
        """Block until every sampler reported ``iteration``; return seq_id -> token."""
        with self._cond:
            n = self.next_collect if iteration is None else iteration
            if n != self.next_collect:
                raise ProtocolFault(f"iterations are collected in order; next is {self.next_collect}")
            k = n % self.n_slots

            def ready():
                s = self.slots[k]
                return s is not None and s.iteration == n and s.complete()

            if not self._cond.wait_for(ready, timeout):
                raise LockTimeout(f"iteration {n} incomplete after {timeout}s")
            slot = self.slots[k]
            self.slots[k] = None
            self.next_collect += 1
            self._cond.notify_all()
        combined = {}
        for seq_id, token in slot.tokens:
            if seq_id in combined:
                raise ProtocolFault(f"sequence {seq_id} reported twice in iteration {n}")
            combined[seq_id] = token
        return combined

    def pump(self, stream, timeout: Optional[float] = None) -> threading.Thread:
        """Feed every frame from ``stream`` on a background thread until it closes."""

        def run():
            from .streams import TruncatedStream
            while True:
                try:
                    frame = read_frame(stream)
                except TruncatedStream:
                    return
                self.feed(frame, timeout)

        t = threading.Thread(target=run, daemon=True)
        t.start()
        return t
