"""Reliable ordered byte streams with write/read accounting.

Each ``write`` is one message on the wire, which lets tests count protocol
rounds. ``read_exact`` either returns exactly ``n`` bytes or raises
:class:`TruncatedStream`.
"""

from __future__ import annotations

import socket
import threading


class TruncatedStream(Exception):
    """The peer closed the stream in the middle of a message."""


class MemoryStream:
    """Reliable in-process byte pipe that counts writes and reads.

    Every ``write`` call is one message. ``read_exact`` blocks until enough
    bytes are buffered or the writer closed.
    """

    def __init__(self):
        self._buf = bytearray()
        self._cond = threading.Condition()
        self._closed = False
        self.writes = 0
        self.bytes_written = 0
        self.bytes_read = 0
        self.log: list = []

    def write(self, data, tag: str = "") -> None:
        with self._cond:
            self._buf += data
            self.writes += 1
            self.bytes_written += len(data)
            self.log.append((tag, len(data)))
            self._cond.notify_all()

    def read_exact(self, n: int, into=None) -> bytes:
        with self._cond:
            while len(self._buf) < n and not self._closed:
                self._cond.wait()
            if len(self._buf) < n:
                raise TruncatedStream(f"wanted {n} bytes, stream closed with {len(self._buf)}")
            chunk = bytes(self._buf[:n])
            del self._buf[:n]
            self.bytes_read += n
        if into is not None:
            into[:n] = chunk
        return chunk

    def close(self):
        with self._cond:
            self._closed = True
            self._cond.notify_all()


class SocketStream:
    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.writes = 0
        self.bytes_written = 0
        self.bytes_read = 0
        self.log: list = []

    def write(self, data, tag: str = "") -> None:
        self.sock.sendall(data)
        self.writes += 1
        self.bytes_written += len(data)
        self.log.append((tag, len(data)))

    def read_exact(self, n: int, into=None) -> bytes:
        buf = bytearray(n) if into is None else into
        view = memoryview(buf)
        got = 0
        while got < n:
            r = self.sock.recv_into(view[got:n], n - got)
            if r == 0:
                raise TruncatedStream(f"wanted {n} bytes, peer closed after {got}")
            got += r
        self.bytes_read += n
        return bytes(buf[:n])

    def close(self):
        try:
            self.sock.shutdown(socket.SHUT_WR)
        except OSError:
            pass


def socket_pair_tcp() -> tuple:
    """A connected loopback TCP pair as (sender stream, receiver stream)."""
    srv = socket.create_server(("127.0.0.1", 0))
    a = socket.create_connection(srv.getsockname())
    b, _ = srv.accept()
    srv.close()
    for s in (a, b):
        s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return SocketStream(a), SocketStream(b)
