"""CSV outputs of a simulation run."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .bubbles import BubbleReport
from .engine import RunResult, TimelineRecord

SUMMARY_FIELDS = ("mode", "p", "iterations", "tokens", "throughput_tok_s",
                  "tpot_mean_s", "tpot_p50_s", "tpot_p99_s", "bubble_frac")


def write_timeline(path: Path, result: RunResult) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(TimelineRecord.CSV_FIELDS)
        for r in result.records:
            w.writerow([r.stage, r.iteration] + [repr(float(getattr(r, k)))
                                                  for k in TimelineRecord.CSV_FIELDS[2:]])


def write_bubbles(path: Path, report: BubbleReport) -> None:
    rows = report.rows()
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def summary_row(result: RunResult, report: BubbleReport, mode: str) -> dict:
    tpot = result.tpot()
    q = (lambda x: float(np.quantile(tpot, x))) if len(tpot) else (lambda x: 0.0)
    return {
        "mode": mode, "p": result.config.p, "iterations": result.iterations,
        "tokens": sum(result.iteration_tokens.values()),
        "throughput_tok_s": result.throughput() if result.iterations else 0.0,
        "tpot_mean_s": float(tpot.mean()) if len(tpot) else 0.0,
        "tpot_p50_s": q(0.5), "tpot_p99_s": q(0.99),
        "bubble_frac": report.bubble_fraction,
    }


def write_rows(path: Path, fieldnames, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(fieldnames), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
