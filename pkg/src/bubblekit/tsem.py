"""Token-safe execution: a CPU executor and a GPU executor that share two
versioned input buffers and are coordinated by two iteration indicators.

The CPU executor may only prepare the next input when ``CI == GI``; it writes
buffer version ``CI mod 2`` and then increments ``CI``. The GPU executor
increments ``GI`` as soon as it takes a step and then reads version
``(GI - 1) mod 2``. Together these keep the version being written disjoint
from the version being read. Every read is bracketed by two FNV-1a checksums
so a violated guard shows up as a :class:`WARHazard` rather than silently
corrupt input.

The forward pass is simulated (:func:`simulated_forward`). Steps are plain
function calls, so the same state can be driven by two threads or stepped
deterministically from a single thread.
"""

from __future__ import annotations

import hashlib
import queue
import random
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

HEADER = struct.Struct("<QII")   # iteration, batch_size, padded batch size
ROW = struct.Struct("<QII")      # seq_id, position, token
ROW_DTYPE = np.dtype([("seq_id", "<u8"), ("position", "<u4"), ("token", "<u4")])


def fnv1a64(data) -> int:
    h = FNV_OFFSET
    for byte in bytes(data):
        h = ((h ^ byte) * FNV_PRIME) & _MASK64
    return h


class WARHazard(RuntimeError):
    """An input buffer changed while the GPU executor was reading it."""


@dataclass(frozen=True)
class SeqEntry:
    seq_id: int
    new_tokens: int
    params_digest: int
    column: int = 0
    token: int = 0
    position: int = 0


@dataclass
class SchedulingOutput:
    iteration: int
    microbatch: list = field(default_factory=list)
    admitted: dict = field(default_factory=dict)   # seq_id -> (prompt, SamplingParams)
    evicted: list = field(default_factory=list)    # seq ids that left the batch
    control: bool = False

    def __post_init__(self):
        if not self.control and not self.microbatch:
            raise ValueError("a scheduling output needs at least one sequence")

    @property
    def batch_size(self) -> int:
        return len(self.microbatch)

    @classmethod
    def poison(cls, iteration: int = -1) -> "SchedulingOutput":
        return cls(iteration, [], control=True)


@dataclass(frozen=True)
class ModelInputDescriptor:
    iteration: int
    batch_size: int
    buffer_version: int
    checksum: int


@dataclass(frozen=True)
class GraphKey:
    version: int
    batch_size: int


def graph_buckets(max_batch: int) -> list[int]:
    sizes, b = [], 1
    while b < max_batch:
        sizes.append(b)
        b *= 2
    sizes.append(max_batch)
    return sizes


@dataclass
class CachedSequence:
    seq_id: int
    tokens: list
    position: int


@dataclass
class BatchMetadata:
    members: tuple = ()
    positions: Optional[np.ndarray] = None
    rows: Optional[np.ndarray] = None
    builds: int = 0
    reuses: int = 0


class ExecState:
    """Everything shared between one stage's CPU and GPU executors."""

    def __init__(self, p: int = 1, max_batch: int = 8, guard: bool = True,
                 raise_on_fault: bool = True):
        if p < 1 or max_batch < 1:
            raise ValueError("p and max_batch must be >= 1")
        self.p = p
        self.max_batch = max_batch
        self.CI = -1
        self.GI = -1
        self.guard = guard
        self.raise_on_fault = raise_on_fault
        nbytes = HEADER.size + ROW.size * max_batch
        self.input_buffers = [bytearray(nbytes), bytearray(nbytes)]
        self.sched_queue: queue.Queue = queue.Queue(maxsize=p)
        self.input_queue: queue.Queue = queue.Queue(maxsize=1)
        self.sequence_cache: dict[int, CachedSequence] = {}
        self.batch_metadata = [BatchMetadata() for _ in range(p)]
        self.buckets = graph_buckets(max_batch)
        self.graphs = {GraphKey(v, b) for v in (0, 1) for b in self.buckets}
        self.outputs: queue.Queue = queue.Queue()
        self.pending: Optional[ModelInputDescriptor] = None
        self.cond = threading.Condition()
        self.faults = 0
        self.overlaps = 0
        self.writing: Optional[int] = None
        self.reading: Optional[int] = None
        self.cpu_done = False
        self.gpu_done = False
        self.last_prep = None        # "build" or "reuse" for the latest cpu step
        self.write_hook: Optional[Callable[[int], None]] = None

    def bucket(self, batch_size: int) -> int:
        for b in self.buckets:
            if b >= batch_size:
                return b
        raise ValueError(f"batch size {batch_size} exceeds captured maximum {self.max_batch}")

    def _notify(self):
        with self.cond:
            self.cond.notify_all()

    def _fault(self, msg: str):
        self.faults += 1
        if self.raise_on_fault:
            raise WARHazard(msg)


def _update_cache(state: ExecState, so: SchedulingOutput) -> None:
    for seq_id in so.evicted:
        state.sequence_cache.pop(seq_id, None)
    for e in so.microbatch:
        cached = state.sequence_cache.get(e.seq_id)
        if cached is None:
            prompt = so.admitted.get(e.seq_id, ((), None))[0]
            cached = state.sequence_cache[e.seq_id] = CachedSequence(e.seq_id, list(prompt), e.position)
        elif e.new_tokens:
            cached.tokens.append(e.token)
        cached.position = e.position


def _prepare_metadata(state: ExecState, slot: int, so: SchedulingOutput) -> BatchMetadata:
    md = state.batch_metadata[slot]
    members = tuple(e.seq_id for e in so.microbatch)
    if members == md.members and md.rows is not None:
        md.reuses += 1
        state.last_prep = "reuse"
    else:
        md.members = members
        md.rows = np.zeros(len(members), dtype=ROW_DTYPE)
        md.rows["seq_id"] = members
        md.builds += 1
        state.last_prep = "build"
    md.rows["position"] = [e.position for e in so.microbatch]
    md.rows["token"] = [e.token for e in so.microbatch]
    return md


def _write_buffer(state: ExecState, version: int, so: SchedulingOutput, rows: np.ndarray) -> int:
    buf = state.input_buffers[version]
    if state.reading == version:
        state.overlaps += 1
    state.writing = version
    padded = state.bucket(so.batch_size)
    HEADER.pack_into(buf, 0, so.iteration & _MASK64, so.batch_size, padded)
    raw = rows.tobytes()
    hook = state.write_hook
    for r in range(state.max_batch):
        start = HEADER.size + r * ROW.size
        buf[start:start + ROW.size] = raw[r * ROW.size:(r + 1) * ROW.size] if r < len(rows) else bytes(ROW.size)
        if hook is not None:
            hook(r)
    state.writing = None
    return fnv1a64(buf)


def cpu_step(state: ExecState, p: Optional[int] = None) -> bool:
    """One CPU-executor transition; returns whether it made progress."""
    if state.pending is not None:
        try:
            state.input_queue.put_nowait(state.pending)
        except queue.Full:
            return False
        state.pending = None
        state.CI += 1
        state._notify()
        return True
    if state.cpu_done:
        return False
    if state.guard and state.CI != state.GI:
        return False
    try:
        so = state.sched_queue.get_nowait()
    except queue.Empty:
        return False
    if so.control:
        state.cpu_done = True
        state.input_queue.put(ModelInputDescriptor(so.iteration, 0, -1, 0))
        state._notify()
        return True
    i = state.CI
    version = i % 2
    slot = i % (p or state.p)
    _update_cache(state, so)
    md = _prepare_metadata(state, slot, so)
    checksum = _write_buffer(state, version, so, md.rows)
    desc = ModelInputDescriptor(so.iteration, so.batch_size, version, checksum)
    try:
        state.input_queue.put_nowait(desc)
    except queue.Full:
        state.pending = desc
        return True
    state.CI += 1
    state._notify()
    return True


def read_rows(buf, batch_size: int) -> bytes:
    return bytes(buf[HEADER.size:HEADER.size + batch_size * ROW.size])


def gpu_step(state: ExecState, forward: Callable) -> bool:
    """One GPU-executor transition.

    ``forward(rows, desc, key)`` receives the descriptor's rows (bytes) and
    its return value is pushed to ``state.outputs``.
    """
    if state.gpu_done or state.input_queue.empty():
        return False
    peek = state.input_queue.queue[0]
    if peek.batch_size == 0:
        state.input_queue.get_nowait()
        state.gpu_done = True
        state.outputs.put(None)
        state._notify()
        return True
    state.GI += 1
    state._notify()
    desc = state.input_queue.get_nowait()
    version = (state.GI - 1) % 2
    if desc.buffer_version != version:
        state._fault(f"iteration {desc.iteration}: descriptor names v{desc.buffer_version}, "
                     f"indicator selects v{version}")
    key = GraphKey(version, state.bucket(desc.batch_size))
    if key not in state.graphs:
        raise KeyError(f"no captured graph for {key}")
    buf = state.input_buffers[version]
    state.reading = version
    if state.writing == version:
        state.overlaps += 1
    try:
        if fnv1a64(buf) != desc.checksum:
            state._fault(f"iteration {desc.iteration}: v{version} changed before read")
        out = forward(read_rows(buf, desc.batch_size), desc, key)
        if fnv1a64(buf) != desc.checksum:
            state._fault(f"iteration {desc.iteration}: v{version} overwritten during read")
    finally:
        state.reading = None
    state.outputs.put((desc, out))
    state._notify()
    return True


def simulated_forward(rows: bytes, stage_id: int, delay_model=None, hidden: Optional[np.ndarray] = None,
                      hidden_size: int = 16, batch_size: Optional[int] = None) -> np.ndarray:
    """Deterministic stand-in for a stage's forward pass.

    Row ``r`` of the ``batch_size x hidden_size`` float32 result depends only on
    ``stage_id``, input row ``r`` and, when given, row ``r`` of ``hidden``.
    ``delay_model(stage_id, batch_size)`` returns seconds to sleep.
    """
    n = len(rows) // ROW.size if batch_size is None else batch_size
    out = np.empty((n, hidden_size), dtype=np.float32)
    for r in range(n):
        h = hashlib.blake2b(digest_size=16, person=b"fwd" + stage_id.to_bytes(4, "little"))
        h.update(rows[r * ROW.size:(r + 1) * ROW.size])
        if hidden is not None:
            h.update(np.ascontiguousarray(hidden[r]).tobytes())
        seed = int.from_bytes(h.digest(), "little")
        out[r] = np.random.default_rng(seed).standard_normal(hidden_size, dtype=np.float32)
    if delay_model is not None:
        delay = delay_model(stage_id, n)
        if delay > 0:
            time.sleep(delay)
    return out


def encode_rows(entries) -> bytes:
    return b"".join(ROW.pack(e.seq_id, e.position, e.token) for e in entries)


# -- harness ---------------------------------------------------------------------

@dataclass
class HarnessReport:
    iterations: int
    completed: int
    faults: int
    overlaps: int
    min_gap: int
    max_gap: int
    deadlocked: bool
    elapsed: float


def run_harness(iterations: int, guard: bool = True, seed: int = 0, max_delay: float = 50e-6,
                p: int = 2, max_batch: int = 4, timeout: float = 120.0) -> HarnessReport:
    """Drive one stage's executors from two threads with random injected delays.

    Faults are counted instead of raised so the guard-disabled run can report
    how many WAR hazards the checksums caught.
    """
    state = ExecState(p=p, max_batch=max_batch, guard=guard, raise_on_fault=False)
    rng_cpu = random.Random(seed)
    rng_gpu = random.Random(seed + 1)
    gaps = []
    stop = threading.Event()

    def jitter(rng):
        d = rng.uniform(0, max_delay)
        if d > max_delay / 2:
            time.sleep(d)

    def slow_write(_row):
        if rng_cpu.random() < 0.25:
            time.sleep(rng_cpu.uniform(0, max_delay))

    state.write_hook = slow_write

    def feeder():
        for i in range(iterations):
            bs = 1 + i % max_batch
            entries = [SeqEntry(seq_id=(i % p) * max_batch + c, new_tokens=1, params_digest=0,
                                column=c, token=(i * 7 + c) % 50000, position=i // p)
                       for c in range(bs)]
            while not stop.is_set():
                try:
                    state.sched_queue.put(SchedulingOutput(i, entries), timeout=0.01)
                    break
                except queue.Full:
                    continue
        state.sched_queue.put(SchedulingOutput.poison())

    def cpu():
        while not stop.is_set() and not (state.cpu_done and state.pending is None):
            if cpu_step(state):
                gaps.append(state.CI - state.GI)
                jitter(rng_cpu)
            else:
                with state.cond:
                    state.cond.wait(0.001)

    def forward(rows, desc, key):
        jitter(rng_gpu)
        return fnv1a64(rows)

    def gpu():
        while not stop.is_set() and not state.gpu_done:
            if gpu_step(state, forward):
                gaps.append(state.CI - state.GI)
            else:
                with state.cond:
                    state.cond.wait(0.001)

    threads = [threading.Thread(target=f, daemon=True) for f in (feeder, cpu, gpu)]
    t0 = time.perf_counter()
    for t in threads:
        t.start()
    deadline = t0 + timeout
    for t in threads:
        t.join(max(0.0, deadline - time.perf_counter()))
    deadlocked = any(t.is_alive() for t in threads)
    stop.set()
    completed = state.outputs.qsize() - (1 if state.gpu_done else 0)
    return HarnessReport(iterations, completed, state.faults, state.overlaps,
                         min(gaps, default=0), max(gaps, default=0), deadlocked,
                         time.perf_counter() - t0)
