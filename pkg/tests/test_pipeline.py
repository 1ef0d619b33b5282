import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bubblekit.pipeline import (
    ConfigError, EngineConfig, Features, PipelineFault, ab_compare, bubble_breakdown, load_config, run,
)
from bubblekit.pipeline.bubbles import TimelineGap
from bubblekit.pipeline.config import DelayProfile, WorkloadSpec, bundled_profile, parse_config
from bubblekit.pipeline.engine import Engine, TimelineRecord, _SamplerWorker, decode_logits, encode_logits
from bubblekit.pipeline.model import layer_split
from bubblekit.pipeline.oracle import mismatches
from bubblekit.pipeline.scheduler import (
    PAD, Scheduler, Workload, decode_schedule, encode_schedule,
)
from bubblekit.sampler import SamplingParams
from bubblekit.tsem import SchedulingOutput, SeqEntry


def small(**kw):
    base = dict(p=2, batch=4, samplers=2, vocab=64, hidden=8, layers=4, iterations=40, seed=5,
                workload=WorkloadSpec(max_new_tokens=(2, 6), prompt_len=(1, 4)))
    base.update(kw)
    return EngineConfig(**base)


def members(so):
    return [e.seq_id for e in so.microbatch]


# -- scheduler ------------------------------------------------------------------

def test_round_robin_microbatches():
    wl = Workload(WorkloadSpec(num_sequences=4, max_new_tokens=(50, 50)), vocab=32, seed=0)
    sched = Scheduler(p=2, width=2, workload=wl, budget=100)
    outs = {so.iteration: so for so in sched.initial()}
    for n in range(10):
        sched.on_tokens(n, {sid: 1 for sid in members(outs[n])})
        so = sched.schedule_next()
        outs[so.iteration] = so
    assert len(outs) == 12
    for n, so in outs.items():
        assert members(so) == ([0, 1] if n % 2 == 0 else [2, 3])


def test_single_stage_serves_whole_batch():
    wl = Workload(WorkloadSpec(max_new_tokens=(50, 50)), vocab=32, seed=0)
    sched = Scheduler(p=1, width=4, workload=wl, budget=10)
    (so,) = sched.initial()
    for n in range(5):
        assert members(so) == [0, 1, 2, 3]
        sched.on_tokens(n, {sid: 0 for sid in members(so)})
        so = sched.schedule_next()


def test_finished_sequence_backfilled_on_its_microbatch():
    wl = Workload(WorkloadSpec(max_new_tokens=(1, 3)), vocab=32, seed=1)
    sched = Scheduler(p=2, width=2, workload=wl, budget=40)
    outs = {so.iteration: so for so in sched.initial()}
    for n in range(30):
        sched.on_tokens(n, {sid: 0 for sid in members(outs[n]) if sid != PAD})
        so = sched.schedule_next()
        outs[so.iteration] = so
        prev = outs[so.iteration - 2]
        for c, (old, new) in enumerate(zip(members(prev), members(so))):
            req = sched.requests[old]
            finished = len(sched.transcript[old]) >= req.max_new_tokens
            if finished:
                assert old in so.evicted and new != old and new in so.admitted
            else:
                assert new == old and new not in so.admitted


def test_sampler_columns_follow_admissions():
    cfg = small(p=2, batch=4, samplers=2)
    worker = _SamplerWorker(1, 2, cfg)
    params = SamplingParams(temperature=0.5, seed=9)
    entries = [SeqEntry(10 + c, 0, params.digest(), c, 3, 2) for c in range(2)]
    so = SchedulingOutput(0, entries, admitted={10: ((3, 4, 5), params), 11: ((7,), params)})
    worker.admit(so)
    rep = worker.replicas[0]
    assert worker.cols == [1] and rep.seq_ids == [11]
    assert rep.f_rep[7, 0] == 1 and rep.f_rep[3, 0] == 0
    pad = SchedulingOutput(2, [SeqEntry(PAD, 0, 0, c) for c in range(2)], evicted=[10, 11])
    worker.admit(pad)
    assert rep.seq_ids == [PAD] and rep.lengths[0] == 0


def test_stops_and_never_resumes():
    wl = Workload(WorkloadSpec(num_sequences=3, max_new_tokens=(1, 2)), vocab=32, seed=2)
    sched = Scheduler(p=2, width=2, workload=wl, budget=100)
    outs = {so.iteration: so for so in sched.initial()}
    n = 0
    while n in outs:
        sched.on_tokens(n, {sid: 0 for sid in members(outs[n]) if sid != PAD})
        so = sched.schedule_next()
        if so is not None:
            assert not sched.stopped
            outs[so.iteration] = so
        n += 1
    assert sched.stopped and sched.schedule_next() is None
    assert sorted(outs) == list(range(len(outs)))
    assert all(len(sched.transcript[s]) == sched.requests[s].max_new_tokens for s in range(3))


seq_entries = st.builds(SeqEntry, st.integers(0, 2**64 - 1), st.integers(0, 1), st.integers(0, 2**64 - 1),
                        st.integers(0, 1000), st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1))
params_st = st.builds(SamplingParams, st.floats(0, 3), st.one_of(st.none(), st.integers(1, 100)),
                      st.one_of(st.none(), st.floats(0.01, 1)), st.one_of(st.none(), st.floats(0, 1)),
                      st.floats(-2, 2), st.floats(-2, 2), st.floats(-2, 2), st.integers(0, 2**64 - 1))


@settings(max_examples=100, deadline=None)
@given(entries=st.lists(seq_entries, min_size=1, max_size=8),
       admitted=st.dictionaries(st.integers(0, 2**64 - 1),
                                st.tuples(st.lists(st.integers(0, 2**32 - 1), min_size=1, max_size=6)
                                          .map(tuple), params_st), max_size=4),
       evicted=st.lists(st.integers(0, 2**64 - 1), max_size=4), it=st.integers(0, 2**64 - 1))
def test_schedule_codec_round_trip(entries, admitted, evicted, it):
    so = SchedulingOutput(it, entries, admitted=admitted, evicted=evicted)
    back = decode_schedule(encode_schedule(so))
    assert back == so


def test_schedule_codec_rejects_trailing_bytes():
    so = SchedulingOutput(1, [SeqEntry(1, 1, 2)])
    with pytest.raises(ValueError, match="trailing"):
        decode_schedule(encode_schedule(so) + b"\0")


# -- model ---------------------------------------------------------------------

def test_layer_split_covers_every_layer_once():
    for layers in range(1, 12):
        for p in range(1, layers + 1):
            parts = layer_split(layers, p)
            assert [i for r in parts for i in r] == list(range(layers))
            assert all(len(r) >= 1 for r in parts)


@pytest.mark.parametrize("t", [1, 2, 4])
def test_logits_shard_round_trip(t):
    rng = np.random.default_rng(t)
    z = rng.standard_normal((5, 16)).astype(np.float32)
    m = decode_logits(encode_logits(z, t), t, 16, 5)
    np.testing.assert_array_equal(m.data, z.T.astype(np.float64))


# -- engine --------------------------------------------------------------------

@pytest.mark.parametrize("p", [1, 2, 3, 4])
@pytest.mark.parametrize("mode", ["baseline", "optimized"])
def test_token_exact_against_reference(p, mode):
    wl = WorkloadSpec(num_sequences=20, max_new_tokens=(1, 6), prompt_len=(1, 5))
    cfg = small(p=p, t=2, batch=7, samplers=3, iterations=300, workload=wl).with_mode(mode)
    r = run(cfg)
    assert len(r.transcript) == 20
    assert all(len(r.transcript[s]) == r.requests[s].max_new_tokens for s in r.transcript)
    assert mismatches(cfg, r) == []


def test_more_samplers_than_columns():
    cfg = small(p=2, batch=4, samplers=5).with_mode("optimized")
    r = run(cfg)
    assert mismatches(cfg, r) == []


def test_single_stage_zero_delay_matches_reference():
    cfg = small(p=1, samplers=1, delays=DelayProfile.zero(), iterations=30).with_mode("optimized")
    r = run(cfg)
    assert mismatches(cfg, r) == [] and r.wall == 0.0


def test_identical_seeds_identical_runs():
    cfg = small(iterations=30).with_mode("optimized")
    a, b = run(cfg), run(cfg)
    assert a.transcript == b.transcript and a.records == b.records
    c = run(replace(cfg, seed=6))
    assert c.transcript != a.transcript


def test_transcript_does_not_depend_on_mode_or_split():
    base = small(p=1, iterations=60, batch=4)
    ref = run(base).transcript
    for p, mode in [(2, "baseline"), (2, "optimized"), (4, "optimized")]:
        got = run(replace(base, p=p).with_mode(mode)).transcript
        common = set(ref) & set(got)
        assert common
        for s in common:
            n = min(len(ref[s]), len(got[s]))
            assert ref[s][:n] == got[s][:n]


def test_timestamps_monotone():
    r = run(small(iterations=40).with_mode("optimized"))
    for rec in r.records:
        rec.check()
        assert rec.recv_ready <= rec.input_ready


def test_zero_iterations():
    r = run(small(iterations=0))
    assert r.records == [] and r.transcript == {} and r.throughput() == 0.0


def test_sat_modes_on_links():
    r = run(small(p=3, iterations=20).with_mode("optimized"))
    for modes in r.link_modes:
        assert modes[0] == 0 and set(modes[1:]) == {1}
    r = run(small(p=3, iterations=20))
    assert all(set(m) == {0} for m in r.link_modes)


def test_fault_surfaces_with_context():
    eng = Engine(small(iterations=20))
    calls = {"n": 0}

    def hook(row):
        calls["n"] += 1
        if calls["n"] > eng.cfg.width * 5:  # the hook fires once per row
            raise OSError("injected")

    eng.states[1].write_hook = hook
    with pytest.raises(PipelineFault) as info:
        eng.run()
    assert info.value.actor == "stage 1 cpu" and info.value.iteration == 5
    assert isinstance(info.value.cause, OSError)


# -- bubbles -------------------------------------------------------------------

def test_zero_delay_has_no_bubbles():
    r = run(small(delays=DelayProfile.zero(), iterations=30))
    rep = bubble_breakdown(r.records, 2)
    assert rep.total("bubbles") < 50e-6


@pytest.mark.parametrize("mode", ["baseline", "optimized"])
def test_bubble_conservation(mode):
    cfg = small(p=4, batch=8, layers=4, iterations=80, delays=DelayProfile()).with_mode(mode)
    r = run(cfg)
    rep = bubble_breakdown(r.records, cfg.p)
    for s in rep.stages:
        assert s.wall == pytest.approx(s.busy + s.bubbles, abs=1e-9)
        assert min(s.load_imbalance, s.intra_stage, s.inter_stage) >= 0
        assert all(0 <= s.fraction(x) <= 1 for x in ("load_imbalance", "intra_stage", "inter_stage"))


def test_constructed_delays_show_up_as_matching_bubbles():
    F = 20.0
    d = replace(DelayProfile.zero(F), sampling_gpu_ms=0.3 * F, prep_ms=0.15 * F)
    cfg = small(p=4, batch=8, iterations=60, delays=d, workload=WorkloadSpec(max_new_tokens=(100, 100)))
    r = run(cfg)
    rep = bubble_breakdown(r.records, cfg.p)
    for s in rep.stages:
        per = s.iterations
        if s.stage < cfg.p - 1:
            assert s.load_imbalance / per == pytest.approx(0.3 * F * 1e-3, rel=1e-6)
        assert s.intra_stage / per == pytest.approx(0.15 * F * 1e-3, rel=1e-6)


def test_saturation_with_balanced_stages():
    F = 10.0
    cfg = small(p=4, batch=16, iterations=120, delays=DelayProfile.zero(F),
                workload=WorkloadSpec(max_new_tokens=(200, 200))).with_mode("optimized")
    r = run(cfg)
    assert r.throughput() >= 0.95 * cfg.width / (F * 1e-3)


def test_timeline_gap_is_a_fault():
    r = run(small(iterations=20))
    recs = [x for x in r.records if not (x.stage == 1 and x.iteration == 7)]
    with pytest.raises(TimelineGap):
        bubble_breakdown(recs, 2)


def test_ab_identical_features_give_unit_ratio():
    cfg = small(iterations=30)
    rows = ab_compare(cfg, variants=(("baseline", Features()), ("again", Features())))
    assert [r.ratio for r in rows] == [1.0, 1.0]


# -- config --------------------------------------------------------------------

def test_bundled_profile_loads():
    loaded = load_config(bundled_profile())
    assert loaded.name == "qwen72b-like" and loaded.engine.p == 4 and loaded.predict.gpus == 16


def test_json_config(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"parallel": {"p": 2, "batch": 6}, "run": {"mode": "optimized"}}))
    cfg = load_config(path).engine
    assert cfg.p == 2 and cfg.width == 3 and cfg.features == Features(True, True, True)


@pytest.mark.parametrize("data, field", [
    ({"parallel": {"p": 0}}, "parallel.p"),
    ({"parallel": {"p": "four"}}, "parallel.p"),
    ({"model": {"layers": 2}, "parallel": {"p": 4}}, "model.layers"),
    ({"delays": {"prep_ms": -1.0}}, "delays.prep_ms"),
    ({"delays": {"warp_ms": 1.0}}, "delays.warp_ms"),
    ({"delays": {"stage_forward_ms": [1.0, 2.0]}}, "delays.stage_forward_ms"),
    ({"run": {"mode": "fast"}}, "run.mode"),
    ({"run": {"seed": -1}}, "run.seed"),
    ({"workload": {"max_new_tokens": [5, 2]}}, "workload.max_new_tokens"),
    ({"bogus": {}}, "bogus"),
    ({"predict": {"layers": 80}}, "predict.per_layer_compute"),
])
def test_config_errors_name_the_field(data, field):
    with pytest.raises(ConfigError) as info:
        parse_config(data)
    assert info.value.field == field
    assert str(info.value).startswith(field)


def test_uneven_batch_pads_last_microbatch():
    cfg = small(p=2, batch=5, iterations=30, workload=WorkloadSpec(max_new_tokens=(50, 50)))
    eng = Engine(cfg)
    r = eng.run()
    assert cfg.width == 3 and eng.scheduler.real == [3, 2]
    assert len(r.transcript) == 5
    assert [r.iteration_tokens[n] for n in range(4)] == [3, 2, 3, 2]
    assert mismatches(cfg, r) == []


def test_timeline_csv_fields():
    assert TimelineRecord.CSV_FIELDS == ("stage", "iteration", "prep_start", "prep_end", "input_ready",
                                         "fwd_start", "fwd_end", "send_start", "send_end", "recv_ready")
