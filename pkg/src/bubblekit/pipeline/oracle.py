"""Single-loop reference: each sequence decoded on its own, no pipeline.

Every step runs the whole layer stack on one row and samples with the
from-scratch reference sampler, so agreement with the pipelined engine shows
that batching, stage splits, sampler sharding and transport left the tokens
unchanged.
"""

from __future__ import annotations

from ..sampler import oracle_sample_step
from ..tsem import ROW
from .config import EngineConfig
from .model import logits_rows, run_layers
from .scheduler import Request


def reference_tokens(cfg: EngineConfig, request: Request, steps: int) -> list:
    outputs: list = []
    for _ in range(steps):
        token = outputs[-1] if outputs else request.prompt[-1]
        position = len(request.prompt) - 1 + len(outputs)
        row = ROW.pack(request.seq_id, position, token)
        h, r = run_layers(row, range(cfg.layers), None, None, cfg.hidden)
        z = logits_rows(h, r, cfg.vocab, cfg.logit_scale)
        out, _ = oracle_sample_step([request.prompt], [outputs], z, [request.params], len(outputs))
        outputs.append(int(out.token_ids[0]))
    return outputs


def reference_transcript(cfg: EngineConfig, requests: dict, lengths: dict) -> dict:
    """``seq_id -> tokens`` for ``lengths[seq_id]`` steps of each request."""
    return {sid: reference_tokens(cfg, requests[sid], lengths[sid]) for sid in lengths}


def mismatches(cfg: EngineConfig, result) -> list:
    """Sequences whose pipelined tokens differ from the reference."""
    lengths = {sid: len(toks) for sid, toks in result.transcript.items()}
    ref = reference_transcript(cfg, result.requests, lengths)
    return [sid for sid in lengths if ref[sid] != result.transcript[sid]]
