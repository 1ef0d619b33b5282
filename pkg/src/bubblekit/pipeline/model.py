"""Deterministic stand-in for a decoder stack.

Each simulated layer maps an input row plus the running hidden state to a new
hidden state through :func:`bubblekit.tsem.simulated_forward`, and the final
hidden state is hashed into a row of logits. Row ``r``'s outputs depend only
on that row's history, so splitting the layers across any number of stages
yields identical logits.
"""

from __future__ import annotations

import hashlib

import numpy as np

from ..sat import DType, Tensor
from ..tsem import simulated_forward

HIDDEN_KEY = "hidden_states"
RESIDUAL_KEY = "residual"


def layer_split(layers: int, p: int) -> list[range]:
    return [range(k * layers // p, (k + 1) * layers // p) for k in range(p)]


def run_layers(rows: bytes, layers: range, hidden: np.ndarray | None, residual: np.ndarray | None,
               hidden_size: int) -> tuple[np.ndarray, np.ndarray]:
    n = len(rows) // 16
    if residual is None:
        residual = np.zeros((n, hidden_size), dtype=np.float32)
    for layer in layers:
        hidden = simulated_forward(rows, stage_id=layer, hidden=hidden, hidden_size=hidden_size)
        residual = residual + hidden
    return hidden, residual


def logits_rows(hidden: np.ndarray, residual: np.ndarray, vocab: int, scale: float) -> np.ndarray:
    """``B x vocab`` float32 logits."""
    out = np.empty((hidden.shape[0], vocab), dtype=np.float32)
    for r in range(hidden.shape[0]):
        h = hashlib.blake2b(hidden[r].tobytes() + residual[r].tobytes(), digest_size=16, person=b"logits")
        rng = np.random.default_rng(int.from_bytes(h.digest(), "little"))
        out[r] = rng.standard_normal(vocab, dtype=np.float32) * np.float32(scale)
    return out


def to_tensors(hidden: np.ndarray, residual: np.ndarray) -> dict:
    return {HIDDEN_KEY: Tensor(DType.F32, hidden.shape, hidden.astype("<f4").tobytes()),
            RESIDUAL_KEY: Tensor(DType.F32, residual.shape, residual.astype("<f4").tobytes())}


def from_tensors(tensors: dict) -> tuple[np.ndarray, np.ndarray]:
    return tensors[HIDDEN_KEY].numpy().copy(), tensors[RESIDUAL_KEY].numpy().copy()
