"""Discrete-event execution of the pipelined decode loop.

All actors run as SimPy processes on one virtual clock. Durations come from
the configured :class:`DelayProfile`. Data still goes through the real
machinery: scheduling outputs go out on a shared-memory ring, each stage's
inputs go through a TSEM execution state, hidden states cross stage
boundaries through SAT senders and receivers, logits reach the sampler pool
through a second ring, and sampled tokens come back as combine frames.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import simpy

from .. import bic
from ..rng import derive_seed
from ..sampler import LogitsMatrix, SamplingParams, assemble_shards, evict_and_admit, new_replica, sample_step
from ..sat import Mode, Receiver, Sender
from ..streams import MemoryStream
from ..tsem import ExecState, cpu_step, gpu_step
from .config import EngineConfig
from .model import from_tensors, layer_split, logits_rows, run_layers, to_tensors
from .scheduler import PAD, Scheduler, Workload, decode_schedule, encode_schedule, schedule_capacity

_MS = 1e-3
_PAD_PARAMS = SamplingParams(temperature=0.0)


class PipelineFault(RuntimeError):
    """A module fault raised inside the pipeline, tagged with where it happened."""

    def __init__(self, actor: str, iteration: int, cause: BaseException):
        super().__init__(actor, iteration, cause)   # SimPy re-raises copies built from args
        self.actor = actor
        self.iteration = iteration
        self.cause = cause

    def __str__(self) -> str:
        return f"{self.actor}, iteration {self.iteration}: {type(self.cause).__name__}: {self.cause}"


@dataclass
class TimelineRecord:
    stage: int
    iteration: int
    prep_start: float = 0.0
    prep_end: float = 0.0
    input_ready: float = 0.0
    fwd_start: float = 0.0
    fwd_end: float = 0.0
    send_start: float = 0.0
    send_end: float = 0.0
    recv_ready: float = 0.0
    busy_end: float = 0.0       # end of device work: forward, plus sampling when it runs on the device
    prep_kind: str = "build"

    CSV_FIELDS = ("stage", "iteration", "prep_start", "prep_end", "input_ready", "fwd_start",
                  "fwd_end", "send_start", "send_end", "recv_ready")

    def check(self) -> None:
        order = (self.prep_start, self.prep_end, self.fwd_start, self.fwd_end, self.send_end)
        if any(a > b for a, b in zip(order, order[1:])) or not self.input_ready <= self.fwd_start:
            raise ValueError(f"non-monotone timeline for stage {self.stage} iteration {self.iteration}")


@dataclass
class RunResult:
    config: EngineConfig
    records: list
    transcript: dict            # seq_id -> generated token ids
    token_times: dict           # seq_id -> virtual time each token reached the scheduler
    done_times: dict            # iteration -> time its tokens were collected
    iteration_tokens: dict      # iteration -> number of real (non-padding) tokens
    requests: dict              # seq_id -> Request
    admissions: list
    wall: float
    link_modes: list = field(default_factory=list)     # per link, SAT mode of every frame
    link_writes: list = field(default_factory=list)    # per link, stream write count
    prep_kinds: dict = field(default_factory=dict)     # stage -> {"build": n, "reuse": n}
    tsem_faults: int = 0

    @property
    def iterations(self) -> int:
        return len(self.done_times)

    def throughput(self, warmup: Optional[int] = None) -> float:
        """Tokens per second over the steady-state window, skipping pipeline fill."""
        its = sorted(self.done_times)
        if not its:
            return 0.0
        p = self.config.p
        warm = 2 * p if warmup is None else warmup
        if len(its) > warm + 1:
            t0 = self.done_times[its[warm]]
            span = self.done_times[its[-1]] - t0
            tokens = sum(self.iteration_tokens[n] for n in its[warm + 1:])
        else:
            span = self.done_times[its[-1]]
            tokens = sum(self.iteration_tokens.values())
        return tokens / span if span > 0 else float("inf")

    def tpot(self) -> np.ndarray:
        gaps = [np.diff(t) for t in self.token_times.values() if len(t) > 1]
        return np.concatenate(gaps) if gaps else np.zeros(0)


class _SamplerWorker:
    """One sampler's replicas, one per microbatch, over the columns it owns."""

    def __init__(self, index: int, samplers: int, cfg: EngineConfig):
        self.index = index
        self.cols = list(range(index, cfg.width, samplers))
        self.V = cfg.vocab
        L_max = max(cfg.workload.prompt_len[1], cfg.workload.max_new_tokens[1])
        n = len(self.cols)
        self.replicas = [new_replica(cfg.vocab, n, L_max, [(0,)] * n, [_PAD_PARAMS] * n, [PAD] * n)
                         if n else None for _ in range(cfg.p)]
        self.p = cfg.p

    def admit(self, so) -> None:
        rep = self.replicas[so.iteration % self.p]
        if rep is None:
            return
        for j, c in enumerate(self.cols):
            e = so.microbatch[c]
            if e.seq_id in so.admitted:
                prompt, params = so.admitted[e.seq_id]
                evict_and_admit(rep, j, prompt, params, e.seq_id)
            elif e.seq_id == PAD:
                if rep.seq_ids[j] != PAD:
                    evict_and_admit(rep, j, (0,), _PAD_PARAMS, PAD)
            elif rep.seq_ids[j] != e.seq_id:
                raise RuntimeError(f"column {c} holds {rep.seq_ids[j]}, schedule says {e.seq_id}")

    def sample(self, iteration: int, logits: LogitsMatrix) -> list:
        rep = self.replicas[iteration % self.p]
        if rep is None:
            return []
        out = sample_step(LogitsMatrix(logits.data[:, self.cols]), rep, iteration, self.index)
        tokens = []
        for j, tok in enumerate(out.token_ids):
            if rep.seq_ids[j] == PAD:
                evict_and_admit(rep, j, (0,), _PAD_PARAMS, PAD)  # keep idle columns from filling up
            else:
                tokens.append((rep.seq_ids[j], int(tok)))
        return tokens


def encode_logits(logits: np.ndarray, t: int) -> bytes:
    """``B x V`` logits as ``t`` vocab-major float32 shards, back to back."""
    shards = np.split(np.asarray(logits, dtype="<f4"), t, axis=1)
    return b"".join(np.ascontiguousarray(s.T).tobytes() for s in shards)


def decode_logits(data: bytes, t: int, V: int, B: int) -> LogitsMatrix:
    flat = np.frombuffer(data, dtype="<f4")
    return assemble_shards(list(flat.reshape(t, V // t, B)), V)


class Engine:
    def __init__(self, cfg: EngineConfig):
        self.cfg = cfg
        self.env = simpy.Environment()
        f = cfg.features
        self.S = cfg.samplers if f.cpu_sampling else 1
        self.workload = Workload(cfg.workload, cfg.vocab, cfg.seed)
        self.scheduler = Scheduler(cfg.p, cfg.width, self.workload, cfg.iterations, cfg.batch)
        self.layers = layer_split(cfg.layers, cfg.p)
        self.states = [ExecState(p=cfg.p, max_batch=cfg.width, guard=True) for _ in range(cfg.p)]
        self.records: dict = {}
        self.events: dict = defaultdict(self.env.event)
        self.gi_pulse = [self.env.event() for _ in range(cfg.p)]
        links = max(cfg.p - 1, 0)
        self.streams = [MemoryStream() for _ in range(links)]
        self.senders = [Sender(s, aware=f.sat_aware) for s in self.streams]
        self.receivers = [Receiver(s, aware=f.sat_aware) for s in self.streams]
        self.workers = [_SamplerWorker(s, self.S, cfg) for s in range(self.S)]
        self.token_streams = [MemoryStream() for _ in range(self.S)]
        slots = 2 * cfg.p + 2
        self.collector = bic.Collector(self.S, n_slots=slots)
        self.frames = defaultdict(int)
        self.done_times: dict = {}
        self.iteration_tokens: dict = {}
        self.token_times: dict = defaultdict(list)
        self.stage_schedules: dict = {}
        self._n_slots = slots

    # -- helpers -------------------------------------------------------------

    def ev(self, *key) -> simpy.Event:
        return self.events[key]

    def _fire(self, *key) -> None:
        self.events[key].succeed()

    def _pulse_gi(self, k: int) -> None:
        ev, self.gi_pulse[k] = self.gi_pulse[k], self.env.event()
        ev.succeed()

    def _forward_time(self, k: int, n: int) -> float:
        d = self.cfg.delays
        base = d.forward(k)
        if d.forward_jitter and base:
            z = np.random.default_rng(derive_seed(self.cfg.seed, "jitter", k, n)).standard_normal()
            base *= max(0.0, 1.0 + d.forward_jitter * z)
        return base

    # -- scheduler -----------------------------------------------------------

    def _dispatch(self, so) -> None:
        self.bic_i.produce(so.iteration, encode_schedule(so), timeout=0)
        self._sched_time[so.iteration] = self.env.now
        self._fire("sched", so.iteration)

    def scheduler_proc(self):
        d = self.cfg.delays
        for so in self.scheduler.initial():
            yield self.env.timeout(d.schedule_ms * _MS)
            self._dispatch(so)
        n = 0
        while n < self.scheduler.next_iteration:
            yield self.ev("frames", n)
            tokens = self.collector.collect(n, timeout=0)
            self.scheduler.on_tokens(n, tokens)
            now = self.env.now
            self.done_times[n] = now
            self.iteration_tokens[n] = len(tokens)
            for sid in tokens:
                self.token_times[sid].append(now)
            if not self.scheduler.stopped:
                yield self.env.timeout(d.schedule_ms * _MS)
                so = self.scheduler.schedule_next()
                if so is not None:
                    if so.iteration != n + self.cfg.p:
                        raise RuntimeError(f"emitted iteration {so.iteration} after collecting {n}")
                    self._dispatch(so)
            n += 1

    def _deliver(self, s: int, n: int):
        yield self.env.timeout(self.cfg.delays.token_ms * _MS)
        self.collector.feed(bic.read_frame(self.token_streams[s]), timeout=0)
        self.frames[n] += 1
        if self.frames[n] == self.S:
            self._fire("frames", n)

    def _submit(self, s: int, n: int, tokens: list) -> None:
        bic.bico_submit(self.token_streams[s], n, s, tokens)
        self.env.process(self._deliver(s, n))

    # -- stages --------------------------------------------------------------

    def cpu_proc(self, k: int):
        cfg, d, st = self.cfg, self.cfg.delays, self.states[k]
        consumer = bic.open_consumer(self.bic_i_name, pin=False)
        self._handles.append(consumer)
        n = 0
        while True:
            yield self.ev("sched", n)
            if cfg.features.tsem:
                while st.CI != st.GI:
                    yield self.gi_pulse[k]
            elif n > 0:
                yield self.ev("done", k, n - 1)
            so = decode_schedule(consumer.consume(n, timeout=0))
            self.stage_schedules[k, n] = so
            rec = self.records[k, n] = TimelineRecord(k, n, prep_start=self.env.now)
            if k == 0:
                rec.recv_ready = self._sched_time[n]
            st.sched_queue.put_nowait(so)
            if not cpu_step(st) or st.pending is not None:
                raise RuntimeError("input preparation did not complete")
            rec.prep_kind = st.last_prep
            reuse = cfg.features.tsem and st.last_prep == "reuse"
            yield self.env.timeout((d.prep_reuse_ms if reuse else d.prep_ms) * _MS)
            rec.prep_end = self.env.now
            self._fire("desc", k, n)
            n += 1

    def gpu_proc(self, k: int):
        cfg, d, st = self.cfg, self.cfg.delays, self.states[k]
        last = k == cfg.p - 1
        n = 0
        while True:
            yield self.ev("desc", k, n)
            rec = self.records[k, n]
            hidden = residual = None
            if k > 0:
                self._fire("posted", k, n)
                yield self.ev("arrived", k, n)
                tensors, it, _mode = self.receivers[k - 1].recv(cfg.width)
                if it != n:
                    raise RuntimeError(f"stage {k} received iteration {it}, expected {n}")
                hidden, residual = from_tensors(tensors)
                rec.recv_ready = self.env.now
            rec.input_ready = self.env.now

            def forward(rows, desc, key, hidden=hidden, residual=residual):
                h, r = run_layers(rows, self.layers[k], hidden, residual, cfg.hidden)
                return logits_rows(h, r, cfg.vocab, cfg.logit_scale) if last else (h, r)

            rec.fwd_start = self.env.now
            gpu_step(st, forward)
            self._pulse_gi(k)
            desc, out = st.outputs.get_nowait()
            if desc.iteration != n:
                raise RuntimeError(f"stage {k} ran iteration {desc.iteration}, expected {n}")
            yield self.env.timeout(self._forward_time(k, n))
            rec.fwd_end = rec.busy_end = rec.send_start = self.env.now

            if not last:
                mode = self.senders[k].send(to_tensors(*out), n)
                cost = (d.payload_ms + (d.meta_ms if mode == Mode.UNAWARE else 0.0)) * _MS
                if cfg.features.sat_aware:
                    rec.send_end = self.env.now + cost
                    self.env.process(self._arrive(k + 1, n, cost))
                else:
                    yield self.ev("posted", k + 1, n)
                    yield self.env.timeout(cost)
                    rec.send_end = self.env.now
                    self._fire("arrived", k + 1, n)
            elif cfg.features.cpu_sampling:
                yield self.env.timeout(d.logits_ms * _MS)
                self.bic_l.produce(n, encode_logits(out, cfg.t), timeout=0)
                rec.busy_end = rec.send_end = self.env.now
                self._fire("logits", n)
            else:
                yield self.env.timeout(d.sampling_gpu_ms * _MS)
                rec.busy_end = rec.send_start = self.env.now
                worker = self.workers[0]
                worker.admit(self.stage_schedules[k, n])
                tokens = worker.sample(n, LogitsMatrix.from_rows(out))
                self._submit(0, n, tokens)
                rec.send_end = self.env.now + d.token_ms * _MS
            self.stage_schedules.pop((k, n), None)
            rec.check()
            self._fire("done", k, n)
            n += 1

    def _arrive(self, k: int, n: int, cost: float):
        yield self.env.timeout(cost)
        self._fire("arrived", k, n)

    def sampler_proc(self, s: int):
        cfg, d = self.cfg, self.cfg.delays
        sched = bic.open_consumer(self.bic_i_name, pin=False)
        logits = bic.open_consumer(self.bic_l_name, pin=False)
        self._handles += [sched, logits]
        worker = self.workers[s]
        n = 0
        while True:
            yield self.ev("sched", n)
            worker.admit(decode_schedule(sched.consume(n, timeout=0)))
            yield self.ev("logits", n)
            z = decode_logits(logits.consume(n, timeout=0), cfg.t, cfg.vocab, cfg.width)
            tokens = worker.sample(n, z)
            yield self.env.timeout(d.sampling_cpu_ms * _MS * len(worker.cols) / cfg.width)
            self._submit(s, n, tokens)
            n += 1

    # -- driver --------------------------------------------------------------

    def _wrap(self, actor: str, gen):
        state = {"n": -1}

        def body():
            try:
                while True:
                    try:
                        target = next(gen)
                    except StopIteration:
                        return
                    frame = gen.gi_frame
                    if frame is not None:
                        state["n"] = frame.f_locals.get("n", state["n"])
                    yield target
            except Exception as exc:
                if isinstance(exc, PipelineFault):
                    raise
                raise PipelineFault(actor, state["n"], exc) from exc

        return body()

    def run(self) -> RunResult:
        cfg = self.cfg
        self.bic_i_name = bic.unique_name("sched")
        self.bic_l_name = bic.unique_name("logits")
        self._handles: list = []
        self._sched_time: dict = {}
        width = cfg.width
        self.bic_i = bic.create(self.bic_i_name, self._n_slots,
                                schedule_capacity(width, cfg.workload.prompt_len[1]))
        self.bic_l = None
        try:
            if cfg.features.cpu_sampling:
                self.bic_l = bic.create(self.bic_l_name, self._n_slots, 4 * cfg.vocab * width)
            self.env.process(self._wrap("scheduler", self.scheduler_proc()))
            for k in range(cfg.p):
                self.env.process(self._wrap(f"stage {k} cpu", self.cpu_proc(k)))
                self.env.process(self._wrap(f"stage {k} gpu", self.gpu_proc(k)))
            if cfg.features.cpu_sampling:
                for s in range(self.S):
                    self.env.process(self._wrap(f"sampler {s}", self.sampler_proc(s)))
            self.env.run()
        finally:
            for h in self._handles:
                h.close()
            for ring in (self.bic_i, self.bic_l):
                if ring is not None:
                    ring.close()
                    ring.unlink()
        return self._result()

    def _result(self) -> RunResult:
        cfg = self.cfg
        done = set(self.done_times)
        records = [r for (k, n), r in sorted(self.records.items(), key=lambda kv: (kv[0][1], kv[0][0]))
                   if n in done]
        kinds = {k: {"build": 0, "reuse": 0} for k in range(cfg.p)}
        for r in records:
            kinds[r.stage][r.prep_kind] += 1
        return RunResult(
            config=cfg, records=records,
            transcript={sid: list(toks) for sid, toks in self.scheduler.transcript.items()},
            token_times=dict(self.token_times), done_times=dict(self.done_times),
            iteration_tokens=dict(self.iteration_tokens), requests=dict(self.scheduler.requests),
            admissions=list(self.scheduler.admissions),
            wall=max((r.send_end for r in records), default=0.0),
            link_modes=[list(s.modes) for s in self.senders],
            link_writes=[s.writes for s in self.streams],
            prep_kinds=kinds, tsem_faults=sum(st.faults for st in self.states),
        )


def run(cfg: EngineConfig) -> RunResult:
    return Engine(cfg).run()
