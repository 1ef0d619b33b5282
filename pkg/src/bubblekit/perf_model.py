"""Closed-form throughput and per-token delay models for TP, PP and hybrid
deployments, plus the per-GPU communication volume of a (p, t) split.

All times are seconds and bandwidths bytes/second. Tensor terms ``s*b*h`` are
converted to bytes with ``ModelSpec.bytes_per_element`` before they are divided
by a bandwidth.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional


class Mode(str, Enum):
    TP = "tp"
    PP = "pp"
    HYBRID = "hybrid"
    MULTINODE_TP = "multinode_tp"
    MULTINODE_PP = "multinode_pp"
    MULTINODE_HYBRID = "multinode_hybrid"


MULTINODE_MODES = (Mode.MULTINODE_TP, Mode.MULTINODE_PP, Mode.MULTINODE_HYBRID)


@dataclass(frozen=True)
class ModelSpec:
    layers: int
    per_layer_compute: float
    seq_len: int
    batch: int
    hidden: int
    bytes_per_element: int = 2
    vocab: int = 32000
    max_len: int = 4096

    def __post_init__(self):
        for name in ("layers", "per_layer_compute", "seq_len", "batch", "hidden",
                     "bytes_per_element", "vocab", "max_len"):
            if not getattr(self, name) > 0:
                raise ValueError(f"ModelSpec.{name} must be > 0, got {getattr(self, name)!r}")
        if self.max_len < self.seq_len:
            raise ValueError("ModelSpec.max_len must be >= seq_len")

    @property
    def activation_bytes(self) -> float:
        """``s*b*h`` expressed in bytes."""
        return float(self.seq_len * self.batch * self.hidden * self.bytes_per_element)


@dataclass(frozen=True)
class ClusterSpec:
    gpus: int
    pp_degree: int
    tp_degree: int
    launch_delay: float
    intra_bw: float
    inter_bw: float
    microbatches: Optional[int] = None  # None means one per stage (m = p)
    hosts: int = 1

    def __post_init__(self):
        for name in ("gpus", "pp_degree", "tp_degree", "intra_bw", "inter_bw", "hosts"):
            if not getattr(self, name) > 0:
                raise ValueError(f"ClusterSpec.{name} must be > 0, got {getattr(self, name)!r}")
        if self.launch_delay < 0:
            raise ValueError("ClusterSpec.launch_delay must be >= 0")
        if self.pp_degree * self.tp_degree != self.gpus:
            raise ValueError(
                f"pp_degree * tp_degree must equal gpus "
                f"({self.pp_degree} * {self.tp_degree} != {self.gpus})")
        if self.microbatches is not None and self.microbatches < 1:
            raise ValueError("ClusterSpec.microbatches must be >= 1")
        if self.intra_bw < self.inter_bw:
            raise ValueError("ClusterSpec.intra_bw must be >= inter_bw")

    @property
    def m(self) -> int:
        return self.pp_degree if self.microbatches is None else self.microbatches


@dataclass(frozen=True)
class PerfEstimate:
    throughput: float  # tokens/second
    delay: float       # seconds/token
    mode: Mode


def comm_volume(model: ModelSpec, p: int, t: int) -> float:
    """Per-GPU communication volume, in elements, of a ``p x t`` deployment.

    ``model.layers`` plays the role of the layer count here; it is unrelated to
    the GPU count of :class:`ClusterSpec`.
    """
    if p < 1 or t < 1:
        raise ValueError(f"p and t must be >= 1, got p={p}, t={t}")
    L = model.layers
    return model.batch * model.hidden * (4 * L * (t - 1) / (p * t) + p - 1)


def _m(cluster: ClusterSpec) -> int:
    if cluster.m < 1:
        raise ValueError("number of microbatches must be >= 1")
    return cluster.m


def eval_tp(model: ModelSpec, cluster: ClusterSpec) -> PerfEstimate:
    if cluster.pp_degree != 1:
        raise ValueError("eval_tp requires pp_degree == 1")
    L, C, N = model.layers, model.per_layer_compute, cluster.gpus
    sbh = model.activation_bytes
    delay = L * C / N + 2 * L * cluster.launch_delay * math.log2(N) + 4 * sbh * L / cluster.intra_bw
    return PerfEstimate(model.batch / delay, delay, Mode.TP)


def eval_pp(model: ModelSpec, cluster: ClusterSpec) -> PerfEstimate:
    if cluster.tp_degree != 1:
        raise ValueError("eval_pp requires tp_degree == 1")
    L, C, N = model.layers, model.per_layer_compute, cluster.gpus
    hop = model.activation_bytes / cluster.intra_bw
    stage = L * C / N + hop
    throughput = (model.batch / _m(cluster)) / stage
    delay = N * (L * C / N) + (N - 1) * hop
    return PerfEstimate(throughput, delay, Mode.PP)


def eval_hybrid(model: ModelSpec, cluster: ClusterSpec) -> PerfEstimate:
    # Verbatim: at t=1 the 4*L*sbh/(p*B1) term survives, so this does not
    # collapse to eval_pp.
    L, C, N = model.layers, model.per_layer_compute, cluster.gpus
    p, t = cluster.pp_degree, cluster.tp_degree
    hop = model.activation_bytes / cluster.intra_bw
    tp_comm = (2 * L / p) * (cluster.launch_delay * math.log2(t) + 2 * hop)
    throughput = (model.batch / _m(cluster)) / (L * C / N + hop + tp_comm)
    delay = p * (L * C / N + tp_comm) + (p - 1) * hop
    return PerfEstimate(throughput, delay, Mode.HYBRID)


def eval_multinode(model: ModelSpec, cluster: ClusterSpec, mode: Mode | str) -> PerfEstimate:
    mode = Mode(mode)
    if mode not in MULTINODE_MODES:
        raise ValueError(f"eval_multinode does not handle mode {mode.value!r}")
    n = cluster.hosts
    if n < 2:
        raise ValueError("eval_multinode requires hosts >= 2")
    N = cluster.gpus
    if n > N:
        raise ValueError(f"hosts ({n}) cannot exceed gpus ({N})")
    L, C = model.layers, model.per_layer_compute
    sbh = model.activation_bytes
    B1, B2 = cluster.intra_bw, cluster.inter_bw
    alpha = cluster.launch_delay
    tp_comm = 2 * L * (alpha * math.log2(N) + 2 * sbh / B2)
    hops = (n - 1) * sbh / B2 + (N - n) * sbh / B1

    if mode is Mode.MULTINODE_TP:
        if cluster.pp_degree != 1:
            raise ValueError("multinode_tp requires pp_degree == 1")
        delay = L * C / N + tp_comm
        return PerfEstimate(model.batch / delay, delay, mode)
    if mode is Mode.MULTINODE_PP:
        if cluster.tp_degree != 1:
            raise ValueError("multinode_pp requires tp_degree == 1")
        throughput = (model.batch / _m(cluster)) / (L * C / N + sbh / B2)
        return PerfEstimate(throughput, L * C + hops, mode)
    throughput = (model.batch / _m(cluster)) / (L * C / N + sbh / B2 + tp_comm)
    return PerfEstimate(throughput, L * C + hops + tp_comm, mode)


def evaluate(model: ModelSpec, cluster: ClusterSpec) -> PerfEstimate:
    """Pick the equation family that matches the cluster's shape."""
    p, t = cluster.pp_degree, cluster.tp_degree
    if cluster.hosts >= 2:
        mode = Mode.MULTINODE_TP if p == 1 else Mode.MULTINODE_PP if t == 1 else Mode.MULTINODE_HYBRID
        return eval_multinode(model, cluster, mode)
    if p == 1:
        return eval_tp(model, cluster)
    if t == 1:
        return eval_pp(model, cluster)
    return eval_hybrid(model, cluster)


@dataclass(frozen=True)
class SweepRow:
    p: int
    t: int
    estimate: PerfEstimate
    feasible: bool


def factor_pairs(N: int) -> list[tuple[int, int]]:
    if N < 1:
        raise ValueError("N must be >= 1")
    return [(p, N // p) for p in range(1, N + 1) if N % p == 0]


def sweep(model: ModelSpec, cluster_template: ClusterSpec, N: int,
          slo_delay: float = math.inf) -> list[SweepRow]:
    """Evaluate every ``p * t = N`` split; sorted by throughput, then smaller p.

    ``cluster_template`` supplies bandwidths, launch delay, host count and the
    microbatch count (``None`` keeps the ``m = p`` default per row).
    """
    rows = []
    for p, t in factor_pairs(N):
        hosts = min(cluster_template.hosts, N)
        cluster = dataclasses.replace(cluster_template, gpus=N, pp_degree=p, tp_degree=t, hosts=hosts)
        est = evaluate(model, cluster)
        rows.append(SweepRow(p, t, est, est.delay <= slo_delay))
    rows.sort(key=lambda r: (-r.estimate.throughput, r.p))
    return rows


SWEEP_CSV_HEADER = ("p", "t", "throughput_tok_s", "delay_s", "feasible")


def sweep_csv_rows(rows: list[SweepRow]) -> list[tuple]:
    return [(r.p, r.t, repr(r.estimate.throughput), repr(r.estimate.delay), int(r.feasible))
            for r in rows]
