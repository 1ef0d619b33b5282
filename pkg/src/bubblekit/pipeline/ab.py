"""Throughput of baseline, each single feature, and the full optimized mode."""

from __future__ import annotations

from dataclasses import dataclass

from .config import EngineConfig, Features
from .engine import run

VARIANTS = (
    ("baseline", Features()),
    ("cpu_sampling", Features(cpu_sampling=True)),
    ("tsem", Features(tsem=True)),
    ("sat_aware", Features(sat_aware=True)),
    ("optimized", Features(True, True, True)),
)


@dataclass(frozen=True)
class ABRow:
    variant: str
    throughput: float
    ratio: float


def ab_compare(cfg: EngineConfig, variants=VARIANTS) -> list:
    results = []
    base = None
    for name, feats in variants:
        thr = run(EngineConfig(**{**cfg.__dict__, "features": feats})).throughput()
        if base is None:
            base = thr
        results.append(ABRow(name, thr, thr / base if base else float("nan")))
    return results
