"""Column-wise CPU sampling with incrementally maintained penalty buffers.

Logits arrive transposed (``V x B``: one column per sequence) and every stage
of the chain (penalties, temperature + softmax, filters, categorical draw)
mutates that matrix in place. The three penalty buffers are kept up to date by
touching only the ``B`` entries that correspond to the newest tokens, so the
penalty step is a single broadcast subtraction.

``oracle_sample_step`` is an independent row-major implementation that
recomputes everything from the full token history; it exists for testing.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .rng import uniform


@dataclass(frozen=True)
class SamplingParams:
    """Per-sequence sampling configuration. ``temperature == 0`` means greedy."""

    temperature: float = 1.0
    top_k: Optional[int] = None
    top_p: Optional[float] = None
    min_p: Optional[float] = None
    alpha_freq: float = 0.0
    alpha_pres: float = 0.0
    alpha_rep: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.temperature >= 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")
        if self.top_k is not None and self.top_k < 1:
            raise ValueError(f"top_k must be >= 1, got {self.top_k}")
        if self.top_p is not None and not 0 < self.top_p <= 1:
            raise ValueError(f"top_p must be in (0, 1], got {self.top_p}")
        if self.min_p is not None and not 0 <= self.min_p <= 1:
            raise ValueError(f"min_p must be in [0, 1], got {self.min_p}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned value")

    def digest(self) -> int:
        packed = struct.pack(
            "<dqddddd Q",
            self.temperature,
            -1 if self.top_k is None else self.top_k,
            -1.0 if self.top_p is None else self.top_p,
            -1.0 if self.min_p is None else self.min_p,
            self.alpha_freq, self.alpha_pres, self.alpha_rep, self.seed,
        )
        return int.from_bytes(hashlib.blake2b(packed, digest_size=8).digest(), "little")


@dataclass
class LogitsMatrix:
    data: np.ndarray  # V x B, vocab-major

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2 or data.shape[0] == 0 or data.shape[1] == 0:
            raise ValueError(f"logits must be a non-empty V x B matrix, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("logits contain non-finite entries")
        if data.dtype != np.float64:
            data = data.astype(np.float64)
        self.data = data

    @classmethod
    def from_rows(cls, rows: np.ndarray) -> "LogitsMatrix":
        """Build from a ``B x V`` (row-per-sequence) array."""
        return cls(np.ascontiguousarray(np.asarray(rows, dtype=np.float64).T))

    @property
    def V(self) -> int:
        return self.data.shape[0]

    @property
    def B(self) -> int:
        return self.data.shape[1]


@dataclass
class SamplingOutput:
    token_ids: np.ndarray
    iteration: int
    sampler_index: int = 0


class SamplerReplica:
    """Sampling state for one microbatch identity.

    ``Y`` is ``L_max x B``; column ``c`` holds ``lengths[c]`` generated ids.
    The penalty buffers are ``V x B`` and always equal a recount of ``Y``
    (``f_freq``, ``f_pres``) or of ``Y`` plus the prompt (``f_rep``).
    """

    def __init__(self, V: int, B: int, L_max: int, prompts: Sequence[Sequence[int]],
                 params: Sequence[SamplingParams], seq_ids: Optional[Sequence] = None,
                 dtype=np.float64):
        if V <= 0 or B <= 0 or L_max <= 0:
            raise ValueError("V, B and L_max must be positive")
        if len(prompts) != B or len(params) != B:
            raise ValueError(f"expected {B} prompts and params, got {len(prompts)} and {len(params)}")
        self.V, self.B, self.L_max = V, B, L_max
        self.Y = np.zeros((L_max, B), dtype=np.int64)
        self.lengths = np.zeros(B, dtype=np.int64)
        self.f_freq = np.zeros((V, B), dtype=dtype)
        self.f_pres = np.zeros((V, B), dtype=dtype)
        self.f_rep = np.zeros((V, B), dtype=dtype)
        self.params = list(params)
        self.prompts = [np.asarray(p, dtype=np.int64) for p in prompts]
        self.seq_ids = list(seq_ids) if seq_ids is not None else list(range(B))
        self.steps = 0
        for c, prompt in enumerate(self.prompts):
            self._check_prompt(prompt)
            self.f_rep[prompt, c] = 1
        self._refresh_params()

    def _check_prompt(self, prompt: np.ndarray) -> None:
        if len(prompt) > self.L_max:
            raise ValueError(f"prompt of length {len(prompt)} exceeds L_max={self.L_max}")
        if len(prompt) and (prompt.min() < 0 or prompt.max() >= self.V):
            raise ValueError("prompt token id out of range")

    def _refresh_params(self) -> None:
        ps = self.params
        self.alpha_freq = np.array([p.alpha_freq for p in ps], dtype=np.float64)
        self.alpha_pres = np.array([p.alpha_pres for p in ps], dtype=np.float64)
        self.alpha_rep = np.array([p.alpha_rep for p in ps], dtype=np.float64)
        self.temperature = np.array([p.temperature for p in ps], dtype=np.float64)
        self.top_k = np.array([self.V if p.top_k is None else min(p.top_k, self.V) for p in ps], dtype=np.int64)
        self.top_p = np.array([1.0 if p.top_p is None else p.top_p for p in ps], dtype=np.float64)
        self.min_p = np.array([0.0 if p.min_p is None else p.min_p for p in ps], dtype=np.float64)
        self.seeds = [p.seed for p in ps]

    def outputs(self, column: int) -> np.ndarray:
        return self.Y[: self.lengths[column], column].copy()

    def footprint_elements(self) -> int:
        return self.f_freq.size + self.f_pres.size + self.f_rep.size + self.Y.size


def new_replica(V: int, B: int, L_max: int, prompts, params, seq_ids=None, dtype=np.float64) -> SamplerReplica:
    return SamplerReplica(V, B, L_max, prompts, params, seq_ids=seq_ids, dtype=dtype)


def assemble_shards(shards: Sequence[np.ndarray], V: Optional[int] = None) -> LogitsMatrix:
    """Stack ``(V/t) x B`` logits shards (already transposed) along the vocab axis."""
    if not shards:
        raise ValueError("no shards given")
    widths = {np.shape(s)[1] for s in shards}
    if len(widths) != 1:
        raise ValueError(f"shards disagree on batch width: {sorted(widths)}")
    rows = sum(np.shape(s)[0] for s in shards)
    if V is not None and rows != V:
        raise ValueError(f"shard rows sum to {rows}, expected V={V}")
    return LogitsMatrix(np.concatenate(shards, axis=0))


def append_tokens(replica: SamplerReplica, token_ids) -> None:
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.shape != (replica.B,):
        raise ValueError(f"expected {replica.B} token ids, got shape {ids.shape}")
    if ids.min() < 0 or ids.max() >= replica.V:
        raise ValueError("token id out of range")
    if np.any(replica.lengths >= replica.L_max):
        raise OverflowError(f"output buffer full (L_max={replica.L_max})")
    cols = np.arange(replica.B)
    replica.Y[replica.lengths, cols] = ids
    replica.lengths += 1
    replica.f_freq[ids, cols] += 1
    replica.f_pres[ids, cols] = 1
    replica.f_rep[ids, cols] = 1
    replica.steps += 1


def evict_and_admit(replica: SamplerReplica, column: int, new_prompt, new_params: SamplingParams,
                    seq_id=None) -> None:
    """Replace the sequence in ``column``; other columns are left untouched."""
    if not 0 <= column < replica.B:
        raise IndexError(f"column {column} out of range for B={replica.B}")
    prompt = np.asarray(new_prompt, dtype=np.int64)
    replica._check_prompt(prompt)
    replica.Y[:, column] = 0
    replica.lengths[column] = 0
    replica.f_freq[:, column] = 0
    replica.f_pres[:, column] = 0
    replica.f_rep[:, column] = 0
    replica.f_rep[prompt, column] = 1
    replica.prompts[column] = prompt
    replica.params[column] = new_params
    replica.seq_ids[column] = column if seq_id is None else seq_id
    replica._refresh_params()


def _check_shapes(logits: LogitsMatrix, replica: SamplerReplica) -> np.ndarray:
    Z = logits.data if isinstance(logits, LogitsMatrix) else logits
    if Z.shape != (replica.V, replica.B):
        raise ValueError(f"logits shape {Z.shape} does not match replica ({replica.V}, {replica.B})")
    return Z


def apply_penalties(logits: LogitsMatrix, replica: SamplerReplica) -> None:
    Z = _check_shapes(logits, replica)
    if replica.alpha_freq.any():
        Z -= replica.alpha_freq * replica.f_freq
    if replica.alpha_pres.any():
        Z -= replica.alpha_pres * replica.f_pres
    if replica.alpha_rep.any():
        Z -= replica.alpha_rep * replica.f_rep


def temperature_softmax(logits: LogitsMatrix, replica: SamplerReplica) -> np.ndarray:
    """Turn each column into probabilities in place and return the matrix.

    Columns with temperature 0 become one-hot at the argmax (lowest id on ties).
    """
    Z = _check_shapes(logits, replica)
    col_max = Z.max(axis=0)
    if np.any(np.isneginf(col_max)):
        raise ValueError("a logits column is entirely -inf")
    greedy = replica.temperature == 0
    if greedy.any():
        winners = Z[:, greedy].argmax(axis=0)
    sampled = ~greedy
    if sampled.all():
        Z /= replica.temperature
        Z -= Z.max(axis=0)
        np.exp(Z, out=Z)
        Z /= Z.sum(axis=0)
    elif sampled.any():
        sub = Z[:, sampled] / replica.temperature[sampled]
        sub -= sub.max(axis=0)
        np.exp(sub, out=sub)
        sub /= sub.sum(axis=0)
        Z[:, sampled] = sub
    if greedy.any():
        cols = np.flatnonzero(greedy)
        Z[:, cols] = 0.0
        Z[winners, cols] = 1.0
    return Z


def filter_probs(probabilities: np.ndarray, replica: SamplerReplica) -> None:
    """Apply top-k, then top-p, then min-p per column, then renormalize."""
    P = probabilities.data if isinstance(probabilities, LogitsMatrix) else probabilities
    _check_shapes(P, replica)
    V = replica.V
    use_k = replica.top_k < V
    use_p = replica.top_p < 1.0
    if use_k.any() or use_p.any():
        order = np.argsort(-P, axis=0, kind="stable")
        ranked = np.take_along_axis(P, order, axis=0)
        keep = np.arange(V)[:, None] < replica.top_k[None, :]
        if use_p.any():
            ranked = np.where(keep, ranked, 0.0)
            cum = np.cumsum(ranked, axis=0)
            # nucleus threshold scaled by the mass that survived top-k
            threshold = replica.top_p * cum[-1]
            cutoff = np.argmax(cum >= threshold, axis=0)
            cutoff = np.where(use_p, cutoff, V - 1)
            keep &= np.arange(V)[:, None] <= cutoff[None, :]
        drop = np.empty_like(keep)
        np.put_along_axis(drop, order, ~keep, axis=0)
        P[drop] = 0.0
    if replica.min_p.any():
        floor = replica.min_p * P.max(axis=0)
        P[P < floor] = 0.0
    P /= P.sum(axis=0)


def sample(probabilities: np.ndarray, replica: SamplerReplica, iteration: int,
           sampler_index: int = 0) -> SamplingOutput:
    """Inverse-CDF draw per column, then record the tokens in the replica.

    The uniform for column ``c`` is keyed by the sequence's seed and its
    current output length, so a sequence's draws do not depend on which
    pipeline iteration or batch position served it.
    """
    P = probabilities.data if isinstance(probabilities, LogitsMatrix) else probabilities
    _check_shapes(P, replica)
    u = np.array([uniform(replica.seeds[c], int(replica.lengths[c])) for c in range(replica.B)])
    cum = np.cumsum(P, axis=0)
    ids = (cum <= u[None, :]).sum(axis=0)
    overflow = ids >= replica.V
    if overflow.any():
        # u beyond the rounded total mass: fall back to the last supported token
        for c in np.flatnonzero(overflow):
            ids[c] = np.flatnonzero(P[:, c] > 0)[-1]
    ids = ids.astype(np.int64)
    append_tokens(replica, ids)
    return SamplingOutput(ids, iteration, sampler_index)


def sample_step(logits: LogitsMatrix, replica: SamplerReplica, iteration: int,
                sampler_index: int = 0) -> SamplingOutput:
    """Run the whole chain on ``logits`` (consumed in place)."""
    apply_penalties(logits, replica)
    P = temperature_softmax(logits, replica)
    filter_probs(P, replica)
    return sample(P, replica, iteration, sampler_index)


# -- reference path ----------------------------------------------------------

def _oracle_row(z: np.ndarray, prompt, outputs, params: SamplingParams):
    V = len(z)
    freq = np.zeros(V)
    for tok in outputs:
        freq[tok] += 1
    pres = (freq > 0).astype(np.float64)
    rep = pres.copy()
    for tok in prompt:
        rep[tok] = 1.0
    z = z - params.alpha_freq * freq
    z = z - params.alpha_pres * pres
    z = z - params.alpha_rep * rep
    if params.temperature == 0:
        best = 0
        for v in range(1, V):
            if z[v] > z[best]:
                best = v
        p = np.zeros(V)
        p[best] = 1.0
    else:
        z = z / params.temperature
        e = np.exp(z - z.max())
        p = e / e.sum()
    order = sorted(range(V), key=lambda v: (-p[v], v))
    k = V if params.top_k is None else min(params.top_k, V)
    kept = order[:k]
    if params.top_p is not None and params.top_p < 1.0:
        mass = 0.0
        for v in kept:
            mass += p[v]
        cum, cut = 0.0, len(kept)
        for i, v in enumerate(kept):
            cum += p[v]
            if cum >= params.top_p * mass:
                cut = i + 1
                break
        kept = kept[:cut]
    q = np.zeros(V)
    q[kept] = p[kept]
    if params.min_p:
        q[q < params.min_p * q.max()] = 0.0
    return q / q.sum()


def oracle_sample_step(prompts, outputs, raw_logits, params, iteration: int,
                       sampler_index: int = 0) -> tuple[SamplingOutput, np.ndarray]:
    """Recompute the chain from scratch, one sequence (row) at a time.

    ``raw_logits`` is ``B x V``. Returns the output and the ``B x V``
    probabilities just before the draw.
    """
    raw = np.asarray(raw_logits, dtype=np.float64)
    probs = np.empty_like(raw)
    ids = np.empty(raw.shape[0], dtype=np.int64)
    for b in range(raw.shape[0]):
        q = _oracle_row(raw[b], prompts[b], outputs[b], params[b])
        probs[b] = q
        u = uniform(params[b].seed, len(outputs[b]))
        cum, pick = 0.0, None
        for v in range(len(q)):
            cum += q[v]
            if cum > u:
                pick = v
                break
        if pick is None:
            pick = int(np.flatnonzero(q > 0)[-1])
        ids[b] = pick
    return SamplingOutput(ids, iteration, sampler_index), probs
