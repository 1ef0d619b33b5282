import struct
import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bubblekit.sat import (
    FRAME, AsyncReceiver, AsyncSender, BadMagic, DType, MemoryStream, Mode, Receiver, Sender,
    SizeMismatch, Tensor, TruncatedStream, capture_structure, decode_metadata, encode_metadata,
    infer_shapes, recv_aware, recv_unaware, send_aware, send_unaware, socket_pair_tcp,
)


def rand_dict(rng, batch, n=None, structure_seed=None):
    """Random dict; with ``structure_seed`` the keys, dtypes and fixed dims
    depend only on that seed, so dicts differ only in dim0 and payload."""
    srng = rng if structure_seed is None else np.random.default_rng(structure_seed)
    n = int(srng.integers(1, 5)) if n is None else n
    out = {}
    for i in range(n):
        dtype = DType(int(srng.integers(0, 6)))
        fixed = tuple(int(d) for d in srng.integers(1, 9, size=srng.integers(0, 3)))
        dims = (batch,) + fixed
        data = rng.integers(0, 256, size=int(np.prod(dims)) * dtype.itemsize, dtype=np.uint8).tobytes()
        out[f"k{i}.{dtype.name}"] = Tensor(dtype, dims, data)
    return out


keys = st.text(min_size=0, max_size=12)
tensor_meta = st.tuples(st.sampled_from(list(DType)), st.lists(st.integers(0, 2**40), max_size=4))


@given(st.dictionaries(keys, tensor_meta, max_size=5))
def test_metadata_round_trip(spec):
    # payload-free tensors: metadata codec only sees dtype/dims/device
    entries = [(k, d, tuple(dims), 0) for k, (d, dims) in spec.items()]
    blob = b"".join([struct.pack("<I", len(entries))] + [
        struct.pack("<H", len(k.encode())) + k.encode() + struct.pack("<BB", d, len(dims))
        + struct.pack(f"<{len(dims)}Q", *dims) + b"\x00" for k, d, dims, _ in entries])
    assert decode_metadata(blob) == entries


def test_metadata_examples():
    assert encode_metadata({}) == b"\x00\x00\x00\x00"
    blob = encode_metadata({"h": Tensor(DType.F32, (2, 4), bytes(32))})
    assert len(blob) == 26
    assert blob == bytes.fromhex("01000000" "0100" "68" "00" "02" "0200000000000000" "0400000000000000" "00")
    d = {"a": Tensor(DType.I64, (3,), bytes(24)), "b": Tensor(DType.BF16, (1, 2), bytes(4))}
    assert encode_metadata(d) == encode_metadata(dict(d))


def test_metadata_rejects_long_key_and_garbage():
    with pytest.raises(ValueError):
        encode_metadata({"x" * 70000: Tensor(DType.F32, (1,), bytes(4))})
    blob = encode_metadata({"h": Tensor(DType.F32, (2, 4), bytes(32))})
    with pytest.raises(TruncatedStream):
        decode_metadata(blob[:-3])
    with pytest.raises(SizeMismatch):
        decode_metadata(blob + b"\x00")


def test_tensor_payload_length_checked():
    with pytest.raises(SizeMismatch):
        Tensor(DType.F16, (2, 2), bytes(7))
    arr = np.arange(6, dtype=np.float32).reshape(2, 3)
    assert np.array_equal(Tensor.from_numpy(arr).numpy(), arr)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 64), st.integers(0, 2**64 - 1))
def test_unaware_round_trip_bit_exact(seed, batch, iteration):
    d = rand_dict(np.random.default_rng(seed), batch)
    s = MemoryStream()
    send_unaware(s, d, iteration)
    got, it = recv_unaware(s)
    assert it == iteration and got == d and list(got) == list(d)
    assert s.writes == 1 + 2 + len(d)


def test_unaware_empty_dict():
    s = MemoryStream()
    send_unaware(s, {}, 5)
    assert [tag for tag, _ in s.log] == ["header", "size", "blob"]
    assert s.bytes_written == FRAME.size + 8 + 4
    assert recv_unaware(s) == ({}, 5)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 64))
def test_aware_matches_unaware(seed, batch):
    d = rand_dict(np.random.default_rng(seed), batch)
    a, u = MemoryStream(), MemoryStream()
    send_aware(a, d, 1)
    send_unaware(u, d, 1)
    got_a, _ = recv_aware(a, capture_structure(d), batch)
    got_u, _ = recv_unaware(u)
    assert got_a == got_u == d
    assert a.writes == 1 + len(d)
    assert a.log[0] == ("header", FRAME.size)


def test_structure_ignores_batch_dim():
    d1 = {"h": Tensor(DType.F32, (7, 4096), bytes(7 * 4096 * 4))}
    d2 = {"h": Tensor(DType.F32, (2, 4096), bytes(2 * 4096 * 4))}
    assert capture_structure(d1) == capture_structure(d2)
    assert capture_structure(d1).entries[0][2] == (4096,)
    d3 = {"g": Tensor(DType.F32, (2, 4096), bytes(2 * 4096 * 4))}
    assert capture_structure(d3) != capture_structure(d2)


def test_infer_shapes():
    st_ = capture_structure({"h": Tensor(DType.F32, (1, 8), bytes(32)), "r": Tensor(DType.F32, (1, 8), bytes(32))})
    assert [n for *_, n in infer_shapes(st_, 3)] == [96, 96]
    assert infer_shapes(st_, 1)[0][2] == (1, 8)
    with pytest.raises(ValueError):
        infer_shapes(st_, 0)


def test_frame_faults_are_distinct():
    s = MemoryStream()
    s.write(b"XXXX" + bytes(FRAME.size - 4))
    with pytest.raises(BadMagic):
        recv_unaware(s)
    s = MemoryStream()
    s.write(FRAME.pack(b"SATW", 9, 0, 0))
    with pytest.raises(BadMagic):
        recv_unaware(s)
    s = MemoryStream()
    send_unaware(s, {"h": Tensor(DType.F32, (2,), bytes(8))}, 0)
    s._buf = s._buf[:-1]
    s.close()
    with pytest.raises(TruncatedStream):
        recv_unaware(s)


def test_endpoints_steady_state_and_fallback():
    rng = np.random.default_rng(0)
    s = MemoryStream()
    tx, rx = Sender(s), Receiver(s)

    def make(b):
        return rand_dict(rng, b, n=3, structure_seed=1)

    def rename(d):
        return {"z" + k: v for k, v in d.items()}

    seq = [make(2), make(5), make(3), make(4), rename(make(4)), make(6), make(2)]
    modes = []
    for i, d in enumerate(seq):
        before = s.writes
        tx.send(d, i)
        got, it, mode = rx.recv(batch_size=next(iter(d.values())).dims[0])
        assert got == d and it == i
        modes.append(mode)
        if mode == Mode.AWARE:
            assert s.writes - before == 1 + len(d)
            assert all(tag in ("header", "payload") for tag, _ in s.log[before:])
    assert modes == [Mode.UNAWARE, Mode.AWARE, Mode.AWARE, Mode.AWARE,
                     Mode.UNAWARE, Mode.UNAWARE, Mode.AWARE]
    assert modes == tx.modes
    assert all(r == 0 for r in rx.prealloc_reads)


def test_unaware_only_sender_never_captures():
    s = MemoryStream()
    tx, rx = Sender(s, aware=False), Receiver(s, aware=False)
    for i in range(3):
        tx.send(rand_dict(np.random.default_rng(2), 2, n=2), i)
        assert rx.recv(2)[2] == Mode.UNAWARE


def test_tcp_round_trip_with_async_ends():
    a, b = socket_pair_tcp()
    tx, rx = AsyncSender(Sender(a), depth=1), AsyncReceiver(Receiver(b))
    rng = np.random.default_rng(7)
    sent = [rand_dict(rng, 1 + i % 5, n=2, structure_seed=3) for i in range(20)]
    structure = capture_structure(sent[0])
    assert all(capture_structure(d) == structure for d in sent)
    for i, d in enumerate(sent):
        rx.post(d[next(iter(d))].dims[0])
        tx.send(d, i)
    got = [rx.get(timeout=10) for _ in sent]
    tx.close(timeout=10)
    rx.post(None)
    assert rx.get(timeout=10) is None
    assert [g[0] for g in got] == sent
    assert [g[2] for g in got] == [Mode.UNAWARE] + [Mode.AWARE] * 19


def test_async_send_does_not_wait_for_receiver():
    s = MemoryStream()
    tx = AsyncSender(Sender(s), depth=1)
    done = threading.Event()

    def push():
        tx.send({"h": Tensor(DType.F32, (1, 2), bytes(8))}, 0)
        done.set()

    threading.Thread(target=push, daemon=True).start()
    assert done.wait(2.0)
    tx.close(timeout=2)


def test_empty_batch_goes_unaware():
    s = MemoryStream()
    tx, rx = Sender(s), Receiver(s)
    tx.send(rand_dict(np.random.default_rng(0), 3, n=2, structure_seed=1), 0)
    rx.recv(3)
    empty = rand_dict(np.random.default_rng(0), 0, n=2, structure_seed=1)
    assert tx.send(empty, 1) == Mode.UNAWARE
    got, _, mode = rx.recv(0)
    assert got == empty and mode == Mode.UNAWARE
