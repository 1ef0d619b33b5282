"""Splitting each stage's device idle time into three kinds of bubble.

For stage ``k`` and iteration ``n``, the idle gap is the time between the end of
device work on ``n-1`` and the start of the forward pass for ``n``. It is
split, in order, into:

* load imbalance: the part explained by the slowest stage doing more device
  work on ``n`` than this one, ``max_j work(j, n) - work(k, n)``;
* intra-stage: the part of what remains during which this stage's CPU was
  preparing the inputs for ``n``;
* inter-stage: everything else, meaning waits on upstream data, blocked sends
  and scheduler round trips.

Each part is clamped so the three sum to the gap, so a stage's wall time over
the window is exactly its device work plus its bubbles.
"""

from __future__ import annotations

from dataclasses import dataclass, field


class TimelineGap(ValueError):
    pass


@dataclass
class StageBubbles:
    stage: int
    iterations: int = 0
    wall: float = 0.0
    busy: float = 0.0
    load_imbalance: float = 0.0
    intra_stage: float = 0.0
    inter_stage: float = 0.0

    @property
    def bubbles(self) -> float:
        return self.load_imbalance + self.intra_stage + self.inter_stage

    def fraction(self, part: str) -> float:
        return getattr(self, part) / self.wall if self.wall > 0 else 0.0

    @property
    def period(self) -> float:
        return self.wall / self.iterations if self.iterations else 0.0


@dataclass
class BubbleReport:
    stages: list = field(default_factory=list)

    @property
    def wall(self) -> float:
        return sum(s.wall for s in self.stages)

    def total(self, part: str) -> float:
        return sum(getattr(s, part) for s in self.stages)

    @property
    def bubble_fraction(self) -> float:
        w = self.wall
        return self.total("bubbles") / w if w > 0 else 0.0

    def rows(self) -> list:
        out = []
        for s in self.stages + [self._aggregate()]:
            out.append({
                "stage": "all" if s.stage < 0 else s.stage,
                "iterations": s.iterations,
                "wall_s": s.wall, "busy_s": s.busy,
                "load_imbalance_s": s.load_imbalance, "intra_stage_s": s.intra_stage,
                "inter_stage_s": s.inter_stage,
                "load_imbalance_frac": s.fraction("load_imbalance"),
                "intra_stage_frac": s.fraction("intra_stage"),
                "inter_stage_frac": s.fraction("inter_stage"),
                "bubble_frac": s.fraction("bubbles"),
            })
        return out

    def _aggregate(self) -> StageBubbles:
        agg = StageBubbles(-1)
        for s in self.stages:
            agg.iterations += s.iterations
            for part in ("wall", "busy", "load_imbalance", "intra_stage", "inter_stage"):
                setattr(agg, part, getattr(agg, part) + getattr(s, part))
        return agg


def _overlap(a0, a1, b0, b1) -> float:
    return max(0.0, min(a1, b1) - max(a0, b0))


def bubble_breakdown(records, p: int, skip: int | None = None, tail: int = 0) -> BubbleReport:
    """Per-stage bubbles over iterations ``[skip, last - tail]`` (``skip`` defaults to p)."""
    by = {(r.stage, r.iteration): r for r in records}
    iterations = sorted({r.iteration for r in records})
    if not iterations:
        return BubbleReport([StageBubbles(k) for k in range(p)])
    first, last = iterations[0], iterations[-1]
    for k in range(p):
        for n in range(first, last + 1):
            if (k, n) not in by:
                raise TimelineGap(f"no record for stage {k} iteration {n}")
    skip = p if skip is None else skip
    lo, hi = max(first + 1, first + skip), last - tail
    report = BubbleReport([StageBubbles(k) for k in range(p)])
    for n in range(lo, hi + 1):
        work = [by[k, n].busy_end - by[k, n].fwd_start for k in range(p)]
        top = max(work)
        for k in range(p):
            r, prev = by[k, n], by[k, n - 1]
            idle = max(0.0, r.fwd_start - prev.busy_end)
            li = min(idle, max(0.0, top - work[k]))
            intra = min(idle - li, _overlap(r.prep_start, r.prep_end, prev.busy_end, r.fwd_start))
            s = report.stages[k]
            s.iterations += 1
            s.wall += r.busy_end - prev.busy_end
            s.busy += work[k]
            s.load_imbalance += li
            s.intra_stage += intra
            s.inter_stage += idle - li - intra
    return report
