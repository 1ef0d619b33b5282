"""Hidden-state transfer between pipeline stages over a byte stream.

Two protocols share one frame header:

* unaware (mode 0): blob size, a metadata blob describing every tensor, then
  the payloads. The receiver learns shapes from the blob before it can read.
* aware (mode 1): payloads only. Both sides hold the structure captured from
  an earlier unaware frame; the receiver infers every shape from the batch
  size it already knows and allocates buffers before any byte arrives.

The sender drops back to mode 0 whenever its dict stops matching the captured
structure, and both ends re-capture from that frame.
"""

from __future__ import annotations

import queue
import struct
import threading
from dataclasses import dataclass
from enum import IntEnum
from typing import Optional

import numpy as np

from .streams import MemoryStream, SocketStream, TruncatedStream, socket_pair_tcp  # noqa: F401

MAGIC = b"SATW"
VERSION = 1
FRAME = struct.Struct("<4sBBQ")
U64 = struct.Struct("<Q")


class Mode(IntEnum):
    UNAWARE = 0
    AWARE = 1
    CONTROL = 2


class DType(IntEnum):
    F32 = 0
    F16 = 1
    BF16 = 2
    F64 = 3
    I32 = 4
    I64 = 5

    @property
    def itemsize(self) -> int:
        return _ITEMSIZE[self]


_ITEMSIZE = {DType.F32: 4, DType.F16: 2, DType.BF16: 2, DType.F64: 8, DType.I32: 4, DType.I64: 8}
_NUMPY = {DType.F32: np.float32, DType.F16: np.float16, DType.F64: np.float64,
          DType.I32: np.int32, DType.I64: np.int64}


class WireError(Exception):
    pass


class BadMagic(WireError):
    pass


class SizeMismatch(WireError):
    pass


@dataclass(frozen=True)
class Tensor:
    dtype: DType
    dims: tuple
    data: bytes
    device: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dtype", DType(self.dtype))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if len(self.data) != self.nbytes:
            raise SizeMismatch(f"payload is {len(self.data)} bytes, dims need {self.nbytes}")

    @property
    def nbytes(self) -> int:
        return int(np.prod(self.dims, dtype=np.int64)) * self.dtype.itemsize

    @classmethod
    def from_numpy(cls, arr: np.ndarray) -> "Tensor":
        code = {np.dtype(v): k for k, v in _NUMPY.items()}[arr.dtype]
        return cls(code, arr.shape, np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())

    def numpy(self) -> np.ndarray:
        if self.dtype == DType.BF16:
            raise TypeError("numpy has no bfloat16; use .data")
        return np.frombuffer(self.data, dtype=np.dtype(_NUMPY[self.dtype]).newbyteorder("<")).reshape(self.dims)


TensorDict = dict  # str -> Tensor, insertion-ordered


def encode_metadata(tensors: TensorDict) -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    for key, t in tensors.items():
        raw = key.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"key of {len(raw)} bytes exceeds the u16 length field")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", t.dtype, len(t.dims)))
        parts.append(struct.pack(f"<{len(t.dims)}Q", *t.dims))
        parts.append(struct.pack("<B", t.device))
    return b"".join(parts)


def decode_metadata(blob: bytes) -> list:
    """Entries as ``(key, dtype, dims, device)`` in wire order."""
    try:
        (count,), off = struct.unpack_from("<I", blob), 4
        entries = []
        for _ in range(count):
            (klen,) = struct.unpack_from("<H", blob, off)
            off += 2
            key = blob[off:off + klen].decode("utf-8")
            if len(key.encode()) != klen:
                raise struct.error("short key")
            off += klen
            dtype, ndim = struct.unpack_from("<BB", blob, off)
            off += 2
            dims = struct.unpack_from(f"<{ndim}Q", blob, off)
            off += 8 * ndim
            (device,) = struct.unpack_from("<B", blob, off)
            off += 1
            entries.append((key, DType(dtype), tuple(dims), device))
    except struct.error as exc:
        raise TruncatedStream(f"metadata blob ends early: {exc}") from None
    if off != len(blob):
        raise SizeMismatch(f"metadata blob has {len(blob) - off} trailing bytes")
    return entries


@dataclass(frozen=True)
class HiddenStructure:
    entries: tuple  # (key, dtype, fixed dims, device)

    def __len__(self):
        return len(self.entries)


def capture_structure(tensors: TensorDict) -> HiddenStructure:
    entries = []
    for key, t in tensors.items():
        if not t.dims:
            raise ValueError(f"tensor {key!r} has no batch dimension")
        entries.append((key, t.dtype, t.dims[1:], t.device))
    return HiddenStructure(tuple(entries))


def infer_shapes(structure: HiddenStructure, batch_size: int) -> list:
    """``(key, dtype, dims, nbytes)`` for every entry at ``batch_size``."""
    if batch_size <= 0:
        raise ValueError("batch_size must be positive")
    out = []
    for key, dtype, fixed, _device in structure.entries:
        dims = (batch_size,) + tuple(fixed)
        out.append((key, dtype, dims, int(np.prod(dims, dtype=np.int64)) * dtype.itemsize))
    return out


def batch_dim(tensors: TensorDict) -> Optional[int]:
    """The shared dim0 of every tensor, or None if they disagree or the dict is empty."""
    dims = {t.dims[0] for t in tensors.values() if t.dims}
    if len(dims) != 1 or any(not t.dims for t in tensors.values()):
        return None
    return dims.pop()


# -- frames ----------------------------------------------------------------------

def write_header(stream, mode: Mode, iteration: int) -> None:
    stream.write(FRAME.pack(MAGIC, VERSION, mode, iteration), "header")


def read_header(stream) -> tuple:
    magic, version, mode, iteration = FRAME.unpack(stream.read_exact(FRAME.size))
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != VERSION:
        raise BadMagic(f"unsupported wire version {version}")
    try:
        return Mode(mode), iteration
    except ValueError:
        raise BadMagic(f"unknown mode {mode}") from None


def send_unaware(stream, tensors: TensorDict, iteration: int) -> None:
    blob = encode_metadata(tensors)
    write_header(stream, Mode.UNAWARE, iteration)
    stream.write(U64.pack(len(blob)), "size")
    stream.write(blob, "blob")
    for t in tensors.values():
        stream.write(t.data, "payload")


def _recv_unaware_body(stream) -> TensorDict:
    size_buf = bytearray(U64.size)
    stream.read_exact(U64.size, size_buf)
    (size,) = U64.unpack(size_buf)
    blob = bytearray(size)
    stream.read_exact(size, blob)
    out = {}
    for key, dtype, dims, device in decode_metadata(bytes(blob)):
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        buf = bytearray(nbytes)
        stream.read_exact(nbytes, buf)
        out[key] = Tensor(dtype, dims, bytes(buf), device)
    return out


def recv_unaware(stream) -> tuple:
    mode, iteration = read_header(stream)
    if mode != Mode.UNAWARE:
        raise WireError(f"expected an unaware frame, got mode {mode.name}")
    return _recv_unaware_body(stream), iteration


def send_aware(stream, tensors: TensorDict, iteration: int) -> None:
    write_header(stream, Mode.AWARE, iteration)
    for t in tensors.values():
        stream.write(t.data, "payload")


def _recv_aware_body(stream, shapes, buffers) -> TensorDict:
    out = {}
    for (key, dtype, dims, nbytes), buf in zip(shapes, buffers):
        stream.read_exact(nbytes, buf)
        out[key] = Tensor(dtype, dims, bytes(buf))
    return out


def recv_aware(stream, structure: HiddenStructure, batch_size: int) -> tuple:
    shapes = infer_shapes(structure, batch_size)
    buffers = [bytearray(n) for *_, n in shapes]
    mode, iteration = read_header(stream)
    if mode != Mode.AWARE:
        raise WireError(f"expected an aware frame, got mode {mode.name}")
    return _recv_aware_body(stream, shapes, buffers), iteration


def send_control(stream, iteration: int = 0) -> None:
    write_header(stream, Mode.CONTROL, iteration)


# -- endpoints -------------------------------------------------------------------

class Sender:
    """Sending end of one link; picks the frame mode per iteration."""

    def __init__(self, stream, aware: bool = True):
        self.stream = stream
        self.aware = aware
        self.structure: Optional[HiddenStructure] = None
        self.modes: list = []

    def send(self, tensors: TensorDict, iteration: int) -> Mode:
        if self.aware and self.structure is not None and batch_dim(tensors) \
                and capture_structure(tensors) == self.structure:
            send_aware(self.stream, tensors, iteration)
            mode = Mode.AWARE
        else:
            send_unaware(self.stream, tensors, iteration)
            mode = Mode.UNAWARE
            if self.aware and batch_dim(tensors) is not None:
                self.structure = capture_structure(tensors)
            else:
                self.structure = None
        self.modes.append(mode)
        return mode

    def close(self, iteration: int = 0):
        send_control(self.stream, iteration)


class Receiver:
    """Receiving end of one link.

    When a structure is held, buffers for ``batch_size`` are allocated before
    the frame header is read; ``prealloc_reads`` records how many stream
    bytes had been consumed at that moment relative to the frame start.
    """

    def __init__(self, stream, aware: bool = True):
        self.stream = stream
        self.aware = aware
        self.structure: Optional[HiddenStructure] = None
        self.prealloc_reads: list = []

    def recv(self, batch_size: Optional[int] = None):
        """``(dict, iteration, mode)``, or ``None`` on a control frame."""
        shapes = buffers = None
        if self.structure is not None and batch_size:
            start = self.stream.bytes_read
            shapes = infer_shapes(self.structure, batch_size)
            buffers = [bytearray(n) for *_, n in shapes]
            self.prealloc_reads.append(self.stream.bytes_read - start)
        mode, iteration = read_header(self.stream)
        if mode == Mode.CONTROL:
            return None
        if mode == Mode.AWARE:
            if shapes is None:
                raise WireError("aware frame arrived without a captured structure or batch size")
            return _recv_aware_body(self.stream, shapes, buffers), iteration, mode
        tensors = _recv_unaware_body(self.stream)
        if self.aware and batch_dim(tensors) is not None:
            self.structure = capture_structure(tensors)
        else:
            self.structure = None
        return tensors, iteration, mode


class AsyncSender:
    """Sender driven by its own thread so ``send`` returns without waiting on
    the peer, with up to ``depth`` iterations in flight."""

    def __init__(self, sender: Sender, depth: int = 1):
        self.sender = sender
        self._q: queue.Queue = queue.Queue(maxsize=depth)
        self.error: Optional[BaseException] = None
        self._t = threading.Thread(target=self._run, daemon=True)
        self._t.start()

    def _run(self):
        while True:
            item = self._q.get()
            try:
                if item is None:
                    self.sender.close()
                    return
                self.sender.send(*item)
            except BaseException as exc:  # surfaced on join
                self.error = exc
                return
            finally:
                self._q.task_done()

    def send(self, tensors: TensorDict, iteration: int) -> None:
        self._q.put((tensors, iteration))

    def flush(self):
        self._q.join()

    def close(self, timeout: Optional[float] = None):
        self._q.put(None)
        self._t.join(timeout)
        if self.error is not None:
            raise self.error


class AsyncReceiver:
    """Communicator thread that posts each receive as soon as the batch size
    for that iteration is known and hands completed dicts to the consumer."""

    def __init__(self, receiver: Receiver):
        self.receiver = receiver
        self.batch_sizes: queue.Queue = queue.Queue()
        self.completed: queue.Queue = queue.Queue()
        self._t = threading.Thread(target=self._run, daemon=True)
        self._t.start()

    def _run(self):
        while True:
            bs = self.batch_sizes.get()
            try:
                item = self.receiver.recv(bs)
            except BaseException as exc:
                self.completed.put(exc)
                return
            self.completed.put(item)
            if item is None:
                return

    def post(self, batch_size: int) -> None:
        self.batch_sizes.put(batch_size)

    def get(self, timeout: Optional[float] = None):
        item = self.completed.get(timeout=timeout)
        if isinstance(item, BaseException):
            raise item
        return item
