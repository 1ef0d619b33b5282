"""Requests, microbatch bookkeeping and the scheduling-output wire codec."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..rng import derive_seed
from ..sampler import SamplingParams
from ..tsem import SchedulingOutput, SeqEntry
from .config import WorkloadSpec

PAD = (1 << 64) - 1  # seq_id of an idle padding column


@dataclass(frozen=True)
class Request:
    seq_id: int
    prompt: tuple
    params: SamplingParams
    max_new_tokens: int


class Workload:
    """Deterministic request stream; request ``i`` depends only on (seed, i)."""

    def __init__(self, spec: WorkloadSpec, vocab: int, seed: int):
        self.spec = spec
        self.vocab = vocab
        self.seed = seed
        self.issued = 0

    def request(self, i: int) -> Request:
        rng = np.random.default_rng(derive_seed(self.seed, "request", i))
        lo, hi = self.spec.prompt_len
        prompt = tuple(int(x) for x in rng.integers(0, self.vocab, size=int(rng.integers(lo, hi + 1))))
        lo, hi = self.spec.max_new_tokens
        max_new = int(rng.integers(lo, hi + 1))
        if rng.random() < self.spec.greedy_fraction:
            params = SamplingParams(temperature=0.0, alpha_rep=float(rng.choice([0.0, 0.5])))
        else:
            params = SamplingParams(
                temperature=float(rng.choice([0.6, 0.8, 1.0, 1.2])),
                top_k=[None, 20, 50][int(rng.integers(3))],
                top_p=[None, 0.9, 0.95][int(rng.integers(3))],
                min_p=[None, 0.02][int(rng.integers(2))],
                alpha_freq=float(rng.choice([0.0, 0.1, 0.3])),
                alpha_pres=float(rng.choice([0.0, 0.2])),
                alpha_rep=float(rng.choice([0.0, 0.4])),
                seed=derive_seed(self.seed, "sequence", i),
            )
        return Request(i, prompt, params, max_new)

    def next(self) -> Optional[Request]:
        n = self.spec.num_sequences
        if n is not None and self.issued >= n:
            return None
        req = self.request(self.issued)
        self.issued += 1
        return req


@dataclass
class ActiveSequence:
    request: Request
    outputs: list = field(default_factory=list)

    @property
    def done(self) -> bool:
        return len(self.outputs) >= self.request.max_new_tokens

    @property
    def last_token(self) -> int:
        return self.outputs[-1] if self.outputs else self.request.prompt[-1]

    @property
    def position(self) -> int:
        return len(self.request.prompt) - 1 + len(self.outputs)


class Scheduler:
    """Round-robin microbatches: iteration ``n`` serves microbatch ``n mod p``.

    Each microbatch is ``width`` columns wide. When ``batch`` is not a
    multiple of ``p``, the trailing columns of the last microbatches are
    permanent padding. A finished sequence keeps its column until the next
    time its microbatch is scheduled, when the column is handed to the next
    waiting request or padded.
    """

    def __init__(self, p: int, width: int, workload: Workload, budget: int, batch: Optional[int] = None):
        self.p = p
        self.width = width
        batch = p * width if batch is None else batch
        self.real = [max(0, min(width, batch - m * width)) for m in range(p)]
        self.workload = workload
        self.budget = budget
        self.columns: list = [[None] * width for _ in range(p)]
        self.transcript: dict = {}
        self.finished: set = set()
        self.requests: dict = {}
        self.next_iteration = 0
        self.stopped = False
        self.admissions: list = []   # (iteration, microbatch, column, seq_id)

    def _active(self) -> bool:
        return any(s is not None and not s.done for mb in self.columns for s in mb)

    def schedule_next(self) -> Optional[SchedulingOutput]:
        n = self.next_iteration
        if self.stopped or n >= self.budget:
            self.stopped = True
            return None
        m = n % self.p
        admitted, evicted = {}, []
        cols = self.columns[m]
        for c in range(self.real[m]):
            s = cols[c]
            if s is not None and s.done:
                evicted.append(s.request.seq_id)
                cols[c] = s = None
            if s is None:
                req = self.workload.next()
                if req is not None:
                    cols[c] = s = ActiveSequence(req)
                    self.requests[req.seq_id] = req
                    self.transcript[req.seq_id] = s.outputs
                    admitted[req.seq_id] = (req.prompt, req.params)
                    self.admissions.append((n, m, c, req.seq_id))
        if not self._active():
            self.stopped = True
            return None
        entries = []
        for c, s in enumerate(cols):
            if s is None:
                entries.append(SeqEntry(PAD, 0, 0, c, 0, 0))
            else:
                entries.append(SeqEntry(s.request.seq_id, 0 if s.request.seq_id in admitted else 1,
                                        s.request.params.digest(), c, s.last_token, s.position))
        self.next_iteration += 1
        return SchedulingOutput(n, entries, admitted=admitted, evicted=evicted)

    def initial(self) -> list:
        out = []
        for _ in range(self.p):
            so = self.schedule_next()
            if so is None:
                break
            out.append(so)
        return out

    def on_tokens(self, iteration: int, tokens: dict) -> None:
        m = iteration % self.p
        for s in self.columns[m]:
            if s is None or s.done:
                continue
            sid = s.request.seq_id
            if sid not in tokens:
                raise KeyError(f"iteration {iteration}: no token for sequence {sid}")
            s.outputs.append(int(tokens[sid]))
            if s.done:
                self.finished.add(sid)
        extra = set(tokens) - {s.request.seq_id for s in self.columns[m] if s is not None}
        if extra:
            raise KeyError(f"iteration {iteration}: tokens for unscheduled sequences {sorted(extra)}")


# -- wire codec for the dispatch channel ----------------------------------------

_HEAD = struct.Struct("<QHHH")         # iteration, entries, admitted, evicted
_ENTRY = struct.Struct("<QIQIII")      # seq_id, new_tokens, params digest, column, token, position
_PARAMS = struct.Struct("<dqdddddQ")
_ADMIT = struct.Struct("<QH")          # seq_id, prompt length


def _pack_params(p: SamplingParams) -> bytes:
    return _PARAMS.pack(p.temperature, -1 if p.top_k is None else p.top_k,
                        -1.0 if p.top_p is None else p.top_p, -1.0 if p.min_p is None else p.min_p,
                        p.alpha_freq, p.alpha_pres, p.alpha_rep, p.seed)


def _unpack_params(buf, off) -> SamplingParams:
    t, k, tp, mp, af, ap, ar, seed = _PARAMS.unpack_from(buf, off)
    return SamplingParams(t, None if k < 0 else k, None if tp < 0 else tp, None if mp < 0 else mp,
                          af, ap, ar, seed)


def encode_schedule(so: SchedulingOutput) -> bytes:
    parts = [_HEAD.pack(so.iteration, len(so.microbatch), len(so.admitted), len(so.evicted))]
    parts += [_ENTRY.pack(e.seq_id, e.new_tokens, e.params_digest, e.column, e.token, e.position)
              for e in so.microbatch]
    for sid, (prompt, params) in so.admitted.items():
        parts.append(_ADMIT.pack(sid, len(prompt)))
        parts.append(struct.pack(f"<{len(prompt)}I", *prompt))
        parts.append(_pack_params(params))
    parts.append(struct.pack(f"<{len(so.evicted)}Q", *so.evicted))
    return b"".join(parts)


def decode_schedule(buf: bytes) -> SchedulingOutput:
    iteration, n_entries, n_admit, n_evict = _HEAD.unpack_from(buf, 0)
    off = _HEAD.size
    entries = []
    for _ in range(n_entries):
        entries.append(SeqEntry(*_ENTRY.unpack_from(buf, off)))
        off += _ENTRY.size
    admitted = {}
    for _ in range(n_admit):
        sid, plen = _ADMIT.unpack_from(buf, off)
        off += _ADMIT.size
        prompt = struct.unpack_from(f"<{plen}I", buf, off)
        off += 4 * plen
        admitted[sid] = (tuple(prompt), _unpack_params(buf, off))
        off += _PARAMS.size
    evicted = list(struct.unpack_from(f"<{n_evict}Q", buf, off))
    off += 8 * n_evict
    if off != len(buf):
        raise ValueError(f"scheduling output has {len(buf) - off} trailing bytes")
    return SchedulingOutput(iteration, entries, admitted=admitted, evicted=evicted)


def schedule_capacity(width: int, max_prompt: int) -> int:
    per_admit = _ADMIT.size + 4 * max_prompt + _PARAMS.size
    return _HEAD.size + width * (_ENTRY.size + per_admit + 8)
