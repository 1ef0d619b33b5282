"""Incremental vs from-scratch sampler benchmark, and its logits file format.

A logits file is a 9-byte header, ``u32 V``, ``u32 B`` and ``u8 dtype_code``
(0 = float32, 1 = float16, 3 = float64, the same codes as the hidden-state
wire format), followed by ``V * B`` little-endian values in vocab-major order.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .rng import derive_seed
from .sampler import LogitsMatrix, SamplingParams, new_replica, sample_step

LOGITS_HEADER = struct.Struct("<IIB")
_CODES = {0: "<f4", 1: "<f2", 3: "<f8"}


def write_logits(path, logits: np.ndarray, code: int = 0) -> None:
    """Write a ``V x B`` matrix."""
    if code not in _CODES:
        raise ValueError(f"unsupported dtype code {code}")
    V, B = logits.shape
    with open(path, "wb") as f:
        f.write(LOGITS_HEADER.pack(V, B, code))
        f.write(np.ascontiguousarray(logits, dtype=_CODES[code]).tobytes())


def read_logits(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < LOGITS_HEADER.size:
        raise ValueError(f"{path}: shorter than the {LOGITS_HEADER.size}-byte header")
    V, B, code = LOGITS_HEADER.unpack_from(raw)
    if code not in _CODES:
        raise ValueError(f"{path}: unsupported dtype code {code}")
    dt = np.dtype(_CODES[code])
    want = LOGITS_HEADER.size + V * B * dt.itemsize
    if len(raw) != want or V == 0 or B == 0:
        raise ValueError(f"{path}: expected {want} bytes for V={V}, B={B}, got {len(raw)}")
    return np.frombuffer(raw, dtype=dt, offset=LOGITS_HEADER.size).reshape(V, B).astype(np.float64)


def bench_params(B: int, seed: int) -> list:
    rng = np.random.default_rng(derive_seed(seed, "bench-params"))
    out = []
    for c in range(B):
        out.append(SamplingParams(
            temperature=float(rng.choice([0.0, 0.7, 1.0])),
            top_k=[None, 50][int(rng.integers(2))],
            top_p=[None, 0.9][int(rng.integers(2))],
            min_p=[None, 0.05][int(rng.integers(2))],
            alpha_freq=0.2, alpha_pres=0.1, alpha_rep=0.3,
            seed=derive_seed(seed, "bench-seq", c)))
    return out


def from_scratch_replica(V, B, L_max, prompts, params, history: np.ndarray):
    """A replica rebuilt by recounting the full output history."""
    rep = new_replica(V, B, L_max, prompts, params)
    steps = history.shape[0]
    if steps:
        cols = np.broadcast_to(np.arange(B), history.shape)
        rep.Y[:steps] = history
        rep.lengths[:] = steps
        np.add.at(rep.f_freq, (history, cols), 1)
        rep.f_pres[history, cols] = 1
        rep.f_rep[history, cols] = 1
        rep.steps = steps
    return rep


@dataclass
class BenchResult:
    V: int
    B: int
    steps: int
    incremental_ns: float
    scratch_ns: float
    identical: bool

    @property
    def ratio(self) -> float:
        return self.scratch_ns / self.incremental_ns if self.incremental_ns else float("nan")


def sample_bench(V: int, B: int, steps: int, seed: int = 0, logits: Optional[np.ndarray] = None) -> BenchResult:
    """Time both paths on identical logits; ns/iteration for each."""
    if logits is not None and logits.shape != (V, B):
        raise ValueError(f"logits file is {logits.shape[0]} x {logits.shape[1]}, expected {V} x {B}")
    rng = np.random.default_rng(derive_seed(seed, "bench-prompts"))
    prompts = [rng.integers(0, V, size=4) for _ in range(B)]
    params = bench_params(B, seed)
    L_max = max(steps, 4)

    def step_logits(i):
        if logits is not None:
            return logits.copy()
        return np.random.default_rng(derive_seed(seed, "bench-logits", i)).standard_normal((V, B)) * 3.0

    t0 = time.perf_counter_ns()
    inc = new_replica(V, B, L_max, prompts, params)   # one-time setup is charged to the incremental path
    t_inc = time.perf_counter_ns() - t0
    t_scr = 0
    history = np.zeros((steps, B), dtype=np.int64)
    identical = True
    for i in range(steps):
        z = step_logits(i)
        z2 = z.copy()
        t0 = time.perf_counter_ns()
        a = sample_step(LogitsMatrix(z), inc, i).token_ids
        t1 = time.perf_counter_ns()
        rep = from_scratch_replica(V, B, L_max, prompts, params, history[:i])
        b = sample_step(LogitsMatrix(z2), rep, i).token_ids
        t2 = time.perf_counter_ns()
        t_inc += t1 - t0
        t_scr += t2 - t1
        identical &= bool(np.array_equal(a, b))
        history[i] = a
    n = max(steps, 1)
    return BenchResult(V, B, steps, t_inc / n, t_scr / n, identical)
