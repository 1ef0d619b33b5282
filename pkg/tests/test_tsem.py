import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bubblekit.tsem import (
    ROW, ExecState, GraphKey, SchedulingOutput, SeqEntry, WARHazard, cpu_step, encode_rows,
    fnv1a64, gpu_step, graph_buckets, run_harness, simulated_forward,
)


def so(i, n=2, base=0):
    return SchedulingOutput(i, [SeqEntry(base + c, 1, 0, c, token=i * 10 + c, position=i) for c in range(n)])


def echo(rows, desc, key):
    return rows


def test_fnv1a_reference_values():
    assert fnv1a64(b"") == 0xCBF29CE484222325
    assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert fnv1a64(b"foobar") == 0x85944171F73967E8


def test_fresh_state_writes_odd_version_first():
    s = ExecState(p=2)
    s.sched_queue.put(so(0))
    assert cpu_step(s)
    assert s.CI == 0 and s.GI == -1
    desc = s.input_queue.queue[0]
    assert desc.buffer_version == 1 and desc.iteration == 0


def test_gpu_reads_previous_indicator_parity():
    s = ExecState(p=2)
    s.CI, s.GI = 2, 2
    s.sched_queue.put(so(3))
    assert cpu_step(s)
    keys = []
    assert gpu_step(s, lambda rows, d, k: keys.append(k))
    assert s.GI == 3
    assert keys == [GraphKey(0, 2)]


def test_guard_blocks_second_prepare():
    s = ExecState(p=2)
    s.sched_queue.put(so(0))
    s.sched_queue.put(so(1))
    assert cpu_step(s)
    assert not cpu_step(s)
    assert s.CI == 0
    assert gpu_step(s, echo)
    assert cpu_step(s)
    assert s.CI == 1


def test_gpu_idle_without_descriptor():
    s = ExecState()
    assert not gpu_step(s, echo)
    assert s.GI == -1


@pytest.mark.parametrize("n", [6, 8])
def test_exhaustive_interleavings_keep_indicator_gap(n):
    # every cpu/gpu call sequence of length n, with enough queued work
    for schedule in itertools.product("cg", repeat=n):
        s = ExecState(p=2)
        for i in range(n):
            s.sched_queue.put_nowait(so(i)) if not s.sched_queue.full() else None
        fed = s.sched_queue.qsize()
        prev = None
        for step in schedule:
            if s.sched_queue.qsize() < 2 and fed < n:
                s.sched_queue.put_nowait(so(fed))
                fed += 1
            if step == "c":
                moved = cpu_step(s)
                if moved:
                    assert prev != "c", "two cpu steps without an interleaved gpu step"
                    prev = "c"
            elif gpu_step(s, echo):
                prev = "g"
            assert s.CI - s.GI in (0, 1)
        assert s.faults == 0


def test_unguarded_reentrant_write_is_detected():
    s = ExecState(p=3, guard=False)
    for i in range(3):
        s.sched_queue.put(so(i))
    assert cpu_step(s)  # iteration 0 -> v1

    def forward(rows, desc, key):
        # while v1 is being read the cpu runs ahead twice and lands on v1 again
        assert cpu_step(s)
        assert cpu_step(s)
        return rows

    with pytest.raises(WARHazard):
        gpu_step(s, forward)
    assert s.overlaps >= 1


def test_guarded_reentrant_cpu_cannot_overwrite():
    s = ExecState(p=3)
    for i in range(3):
        s.sched_queue.put(so(i))
    assert cpu_step(s)
    calls = []

    def forward(rows, desc, key):
        calls.append(cpu_step(s))
        calls.append(cpu_step(s))
        return rows

    assert gpu_step(s, forward)
    assert calls == [True, False]
    assert s.faults == 0


def test_descriptor_rows_match_scheduling_output():
    s = ExecState(p=1, max_batch=4)
    out = so(5, n=3, base=100)
    s.sched_queue.put(out)
    cpu_step(s)
    got = []
    gpu_step(s, lambda rows, d, k: got.append((rows, d, k)))
    rows, d, k = got[0]
    assert rows == encode_rows(out.microbatch)
    assert d.batch_size == 3 and k.batch_size == 4


def test_graph_buckets_and_padding():
    assert graph_buckets(8) == [1, 2, 4, 8]
    assert graph_buckets(6) == [1, 2, 4, 6]
    s = ExecState(max_batch=6)
    assert s.bucket(3) == 4 and s.bucket(5) == 6 and s.bucket(1) == 1
    with pytest.raises(ValueError):
        s.bucket(7)


def test_batch_metadata_reused_for_same_membership():
    s = ExecState(p=2)
    kinds = []
    for i in range(6):
        s.sched_queue.put(so(i, base=(i % 2) * 10))
        cpu_step(s)
        kinds.append(s.last_prep)
        gpu_step(s, echo)
    assert kinds == ["build", "build", "reuse", "reuse", "reuse", "reuse"]
    s.sched_queue.put(so(6, n=1, base=0))
    cpu_step(s)
    assert s.last_prep == "build"


def test_sequence_cache_tracks_tokens_and_evictions():
    s = ExecState(p=1)
    s.sched_queue.put(SchedulingOutput(0, [SeqEntry(7, 0, 0, 0, token=0, position=3)],
                                       admitted={7: ((1, 2, 3), None)}))
    cpu_step(s); gpu_step(s, echo)
    s.sched_queue.put(SchedulingOutput(1, [SeqEntry(7, 1, 0, 0, token=42, position=4)]))
    cpu_step(s); gpu_step(s, echo)
    assert s.sequence_cache[7].tokens == [1, 2, 3, 42]
    s.sched_queue.put(SchedulingOutput(2, [SeqEntry(8, 0, 0, 0)], evicted=[7]))
    cpu_step(s)
    assert 7 not in s.sequence_cache


def test_poison_shuts_both_executors_down():
    s = ExecState()
    s.sched_queue.put(SchedulingOutput.poison())
    assert cpu_step(s) and s.cpu_done
    assert gpu_step(s, echo) and s.gpu_done
    assert s.outputs.get() is None


def test_empty_scheduling_output_rejected():
    with pytest.raises(ValueError):
        SchedulingOutput(0, [])


@settings(max_examples=50, deadline=None)
@given(st.binary(min_size=ROW.size, max_size=ROW.size * 4).filter(lambda b: len(b) % ROW.size == 0),
       st.data())
def test_forward_payload_sensitive_to_every_byte(rows, data):
    base = simulated_forward(rows, stage_id=1)
    assert base.shape == (len(rows) // ROW.size, 16)
    assert np.array_equal(base, simulated_forward(rows, stage_id=1))
    i = data.draw(st.integers(0, len(rows) - 1))
    bit = data.draw(st.integers(0, 7))
    flipped = bytearray(rows)
    flipped[i] ^= 1 << bit
    assert not np.array_equal(base, simulated_forward(bytes(flipped), stage_id=1))


def test_forward_rows_independent_of_batch_neighbours():
    a = encode_rows([SeqEntry(1, 1, 0, token=5, position=2)])
    b = encode_rows([SeqEntry(9, 1, 0, token=3, position=0)])
    alone = simulated_forward(a, 0)
    together = simulated_forward(b + a, 0)
    assert np.array_equal(alone[0], together[1])


def test_threaded_harness_guarded_and_unguarded():
    ok = run_harness(500, guard=True, seed=3)
    assert not ok.deadlocked and ok.completed == 500 and ok.faults == 0
    assert 0 <= ok.min_gap and ok.max_gap <= 1
    bad = run_harness(500, guard=False, seed=3)
    assert bad.faults >= 1
