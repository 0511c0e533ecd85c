"""Thin OS-socket adapter for the session contract.

Carries the same control/stream semantics as the simulated transport over a
real connected socket: a single byte stream multiplexing frames of

    [stream id: varint][op: u8][length: varint][payload]

Stream id 0 is the control channel (each DATA frame is one control
message's bytes); other ids are unidirectional data streams opened
implicitly by
their first frame.  Callbacks fire on the session's reader thread.
"""

from __future__ import annotations

import socket
import threading
from typing import Callable

from .transport import DisconnectedError
from .wire import IncompleteError, decode_varint, encode_varint

_OP_DATA = 0x00
_OP_END = 0x01
_OP_BYE = 0x02

_CONTROL_STREAM = 0


class SocketRecvStream:
    """Incoming unidirectional stream; chunks buffer until a sink is set."""

    def __init__(self, stream_id: int) -> None:
        self.stream_id = stream_id
        self.finished = False
        self._pending: list[tuple[bytes, bool]] = []
        self._on_data: Callable[[bytes, bool], None] | None = None
        self._lock = threading.Lock()

    def set_on_data(self, fn: Callable[[bytes, bool], None]) -> None:
        with self._lock:
            self._on_data = fn
            pending, self._pending = self._pending, []
        for data, fin in pending:
            fn(data, fin)

    def _deliver(self, data: bytes, fin: bool) -> None:
        if fin:
            self.finished = True
        with self._lock:
            sink = self._on_data
            if sink is None:
                self._pending.append((data, fin))
                return
        sink(data, fin)


class SocketSendStream:
    """Outgoing unidirectional stream over a :class:`SocketSession`."""

    def __init__(self, session: "SocketSession", stream_id: int) -> None:
        self.session = session
        self.stream_id = stream_id
        self.ended = False

    def send(self, data: bytes) -> None:
        if self.ended:
            raise ValueError(f"stream {self.stream_id} already ended")
        self.session._send_frame(self.stream_id, _OP_DATA, bytes(data))

    def end(self, final: bytes = b"") -> None:
        if self.ended:
            raise ValueError(f"stream {self.stream_id} already ended")
        self.ended = True
        self.session._send_frame(self.stream_id, _OP_END, bytes(final))


class SocketSession:
    """One endpoint of a connected socket speaking the mux framing."""

    def __init__(self, sock: socket.socket, name: str = "") -> None:
        self.sock = sock
        self.name = name
        self._send_lock = threading.Lock()
        self._closed = False
        self._close_lock = threading.Lock()
        self._next_stream_id = 1
        self._incoming: dict[int, SocketRecvStream] = {}
        self._on_control: Callable[[bytes], None] | None = None
        self._on_stream: Callable[[SocketRecvStream], None] | None = None
        self._on_close: Callable[[], None] | None = None
        self._reader: threading.Thread | None = None

    # -- wiring ---------------------------------------------------------------

    def set_on_control(self, fn: Callable[[bytes], None]) -> None:
        self._on_control = fn

    def set_on_stream(self, fn: Callable[[SocketRecvStream], None]) -> None:
        self._on_stream = fn

    def set_on_close(self, fn: Callable[[], None]) -> None:
        self._on_close = fn

    def start(self) -> None:
        """Spawn the reader thread; callbacks fire on that thread."""
        if self._reader is not None:
            return
        self._reader = threading.Thread(
            target=self._read_loop, name=f"moqgate-sock-{self.name}", daemon=True
        )
        self._reader.start()

    # -- sending --------------------------------------------------------------

    def send_control(self, data: bytes) -> None:
        self._send_frame(_CONTROL_STREAM, _OP_DATA, bytes(data))

    def open_stream(self) -> SocketSendStream:
        if self._closed:
            raise DisconnectedError(f"session {self.name} is closed")
        stream_id = self._next_stream_id
        self._next_stream_id += 1
        return SocketSendStream(self, stream_id)

    def _send_frame(self, stream_id: int, op: int, payload: bytes) -> None:
        if self._closed:
            raise DisconnectedError(f"session {self.name} is closed")
        frame = encode_varint(stream_id) + bytes([op]) + encode_varint(len(payload)) + payload
        try:
            with self._send_lock:
                self.sock.sendall(frame)
        except OSError as exc:
            raise DisconnectedError(str(exc)) from exc

    def close(self) -> None:
        """Tell the peer goodbye and tear the socket down (idempotent)."""
        with self._close_lock:
            if self._closed:
                return
            self._closed = True
        try:
            with self._send_lock:
                self.sock.sendall(
                    encode_varint(_CONTROL_STREAM) + bytes([_OP_BYE]) + encode_varint(0)
                )
        except OSError:
            pass
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()

    # -- receiving ------------------------------------------------------------

    def _read_loop(self) -> None:
        try:
            while True:
                frame = self._read_frame()
                if frame is None:
                    break
                stream_id, op, payload = frame
                if op == _OP_BYE:
                    break
                if stream_id == _CONTROL_STREAM:
                    if op == _OP_DATA and self._on_control is not None:
                        self._on_control(payload)
                    continue
                stream = self._incoming.get(stream_id)
                if stream is None:
                    stream = SocketRecvStream(stream_id)
                    self._incoming[stream_id] = stream
                    if self._on_stream is not None:
                        self._on_stream(stream)
                stream._deliver(payload, fin=(op == _OP_END))
        except OSError:
            pass
        locally_closed = self._closed
        self._closed = True
        if not locally_closed and self._on_close is not None:
            self._on_close()

    def _read_frame(self) -> tuple[int, int, bytes] | None:
        stream_id = self._read_varint()
        if stream_id is None:
            return None
        op_byte = self._recv_exact(1)
        if op_byte is None:
            return None
        length = self._read_varint()
        if length is None:
            return None
        payload = self._recv_exact(length) if length else b""
        if payload is None:
            return None
        return stream_id, op_byte[0], payload

    def _read_varint(self) -> int | None:
        first = self._recv_exact(1)
        if first is None:
            return None
        total = 1 << (first[0] >> 6)
        rest = self._recv_exact(total - 1) if total > 1 else b""
        if rest is None:
            return None
        try:
            value, _ = decode_varint(first + rest, 0)
        except IncompleteError:
            return None
        return value

    def _recv_exact(self, n: int) -> bytes | None:
        buf = b""
        while len(buf) < n:
            try:
                chunk = self.sock.recv(n - len(buf))
            except OSError:
                return None
            if not chunk:
                return None
            buf += chunk
        return buf if n else b""
