"""Frame endpoints: loopback UDP ("datagram"), TCP ("stream") and an in-memory
queue pair standing in for ESP-NOW / BLE links.

Each endpoint moves whole encoded frames. A :class:`FaultInjector` can sit on
the send path to drop, duplicate, reorder or corrupt frames.
"""

from __future__ import annotations

import collections
import logging
import queue
import random
import socket
import threading
import time
from dataclasses import dataclass, field

from ..protocols import ProtocolProfile
from .frames import (
    HEADER_SIZE,
    Frame,
    FrameError,
    MsgType,
    decode_frame,
    encode_frame,
    peek_payload_len,
)

__all__ = [
    "ConnectError",
    "Endpoint",
    "EndpointClosed",
    "FaultInjector",
    "HandshakeTimeout",
    "Listener",
    "TransportError",
    "connect",
    "listen",
    "open_pair",
]

log = logging.getLogger(__name__)

KINDS = ("datagram", "stream", "in_memory")
_RCVBUF = 4 << 20
_HELLO = Frame(MsgType.ACK, 0, 0, 0, b"HELLO")


class TransportError(Exception):
    pass


class ConnectError(TransportError):
    pass


class HandshakeTimeout(TransportError):
    pass


class EndpointClosed(TransportError):
    pass


@dataclass
class FaultInjector:
    """Send-side fault injection.

    Data frames may be lost, duplicated, held back behind the next frame
    (reordering) or bit-flipped (caught by the receiver's CRC). ACK frames are
    only subject to loss and duplication.
    """

    loss: float = 0.0
    duplicate: float = 0.0
    reorder: float = 0.0
    corrupt: float = 0.0
    seed: int | None = None
    dropped: list[tuple[int, int, int]] = field(default_factory=list)
    _held: list[bytes] = field(default_factory=list)

    def __post_init__(self):
        for name in ("loss", "duplicate", "reorder", "corrupt"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be a probability, got {p}")
        self._rng = random.Random(self.seed)

    @property
    def active(self) -> bool:
        return any((self.loss, self.duplicate, self.reorder, self.corrupt))

    def on_send(self, frame: Frame, raw: bytes) -> list[bytes]:
        rng = self._rng
        if rng.random() < self.loss:
            self.dropped.append((int(frame.msg_type), frame.tensor_id, frame.seq))
            return []
        if frame.msg_type is not MsgType.ACK and rng.random() < self.corrupt:
            bit = rng.randrange(len(raw) * 8)
            buf = bytearray(raw)
            buf[bit // 8] ^= 1 << (bit % 8)
            raw = bytes(buf)
        out = [raw]
        if rng.random() < self.duplicate:
            out.append(raw)
        if frame.msg_type is not MsgType.ACK:
            held, self._held = self._held, []
            if rng.random() < self.reorder:
                self._held = out
                out = []
            out.extend(held)
        return out

    def flush(self) -> list[bytes]:
        held, self._held = self._held, []
        return held


class Endpoint:
    """One side of a bidirectional frame channel.

    ``backlog`` holds frames read while waiting for something else;
    ``completed`` remembers finished inbound messages so late retransmissions
    can be re-acknowledged instead of confusing the next exchange.
    """

    kind = "abstract"

    def __init__(self, faults: FaultInjector | None = None, max_payload: int | None = None):
        self.faults = faults
        self.max_payload = max_payload
        self.closed = False
        self.backlog: collections.deque[Frame] = collections.deque()
        self.completed: dict[tuple[int, int], bool] = {}
        self.frames_out = 0
        self.frames_in = 0
        self.corrupt_in = 0

    # subclass hooks
    def _send_raw(self, raw: bytes) -> None:
        raise NotImplementedError

    def _recv_raw(self, timeout: float | None) -> bytes | None:
        raise NotImplementedError

    def _close(self) -> None:
        pass

    def send_frame(self, frame: Frame) -> None:
        if self.closed:
            raise EndpointClosed(f"{self.kind} endpoint is closed")
        if self.max_payload is not None and len(frame.payload) > self.max_payload:
            raise ValueError(f"payload {len(frame.payload)} B exceeds link max {self.max_payload} B")
        raw = encode_frame(frame)
        out = self.faults.on_send(frame, raw) if self.faults else [raw]
        for r in out:
            self._send_raw(r)
        self.frames_out += 1

    def flush(self) -> None:
        if self.faults and not self.closed:
            for r in self.faults.flush():
                self._send_raw(r)

    def recv_frame(self, timeout: float | None = None) -> Frame | None:
        """Next valid frame, or None once ``timeout`` seconds pass without one.

        Frames failing magic/CRC checks are counted and skipped.
        """
        if self.backlog:
            return self.backlog.popleft()
        if self.closed:
            raise EndpointClosed(f"{self.kind} endpoint is closed")
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            remaining = None if deadline is None else max(0.0, deadline - time.monotonic())
            raw = self._recv_raw(remaining)
            if raw is None:
                return None
            try:
                frame = decode_frame(raw)
            except FrameError as exc:
                self.corrupt_in += 1
                log.debug("dropping bad frame: %s", exc)
                if deadline is not None and time.monotonic() >= deadline:
                    return None
                continue
            self.frames_in += 1
            return frame

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            self._close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class InMemoryEndpoint(Endpoint):
    kind = "in_memory"

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue, **kw):
        super().__init__(**kw)
        self._inbox = inbox
        self._outbox = outbox

    def _send_raw(self, raw):
        self._outbox.put(raw)

    def _recv_raw(self, timeout):
        try:
            return self._inbox.get(timeout=timeout)
        except queue.Empty:
            return None


class DatagramEndpoint(Endpoint):
    kind = "datagram"

    def __init__(self, sock: socket.socket, peer: tuple | None = None, **kw):
        super().__init__(**kw)
        self.sock = sock
        self.peer = peer

    @property
    def address(self):
        return self.sock.getsockname()

    def _send_raw(self, raw):
        if self.peer is None:
            raise TransportError("datagram endpoint has no peer yet")
        try:
            self.sock.sendto(raw, self.peer)
        except OSError as exc:
            if self.closed:
                raise EndpointClosed("datagram endpoint is closed") from None
            raise TransportError(f"sendto failed: {exc}") from exc

    def _recv_raw(self, timeout):
        self.sock.settimeout(timeout)
        while True:
            try:
                raw, addr = self.sock.recvfrom(HEADER_SIZE + 0xFFFF)
            except socket.timeout:
                return None
            except OSError as exc:
                if self.closed:
                    raise EndpointClosed("datagram endpoint is closed") from None
                raise TransportError(f"recvfrom failed: {exc}") from exc
            if self.peer is None or addr == self.peer:
                return raw

    def _close(self):
        self.sock.close()


class StreamEndpoint(Endpoint):
    kind = "stream"

    def __init__(self, sock: socket.socket, **kw):
        super().__init__(**kw)
        self.sock = sock
        self._buf = bytearray()
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def _send_raw(self, raw):
        try:
            self.sock.sendall(raw)
        except OSError as exc:
            if self.closed:
                raise EndpointClosed("stream endpoint is closed") from None
            raise TransportError(f"send failed: {exc}") from exc

    def _frame_ready(self) -> int:
        if len(self._buf) < HEADER_SIZE:
            return 0
        try:
            need = HEADER_SIZE + peek_payload_len(bytes(self._buf[:HEADER_SIZE]))
        except FrameError:
            # unrecoverable framing loss on a byte stream
            raise TransportError("stream desynchronised: bad frame header") from None
        return need if len(self._buf) >= need else 0

    def _recv_raw(self, timeout):
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            need = self._frame_ready()
            if need:
                raw = bytes(self._buf[:need])
                del self._buf[:need]
                return raw
            remaining = None if deadline is None else deadline - time.monotonic()
            if remaining is not None and remaining <= 0:
                return None
            self.sock.settimeout(remaining)
            try:
                chunk = self.sock.recv(1 << 16)
            except socket.timeout:
                return None
            except OSError as exc:
                if self.closed:
                    raise EndpointClosed("stream endpoint is closed") from None
                raise TransportError(f"recv failed: {exc}") from exc
            if not chunk:
                raise EndpointClosed("peer closed the stream")
            self._buf.extend(chunk)

    def _close(self):
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


# --- construction --------------------------------------------------------------

def _udp_socket(host: str, port: int) -> socket.socket:
    s = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    s.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, _RCVBUF)
    try:
        s.bind((host, port))
    except OSError as exc:
        s.close()
        raise ConnectError(f"cannot bind udp {host}:{port}: {exc}") from exc
    return s


class Listener:
    """Receiver-side role: binds first, then accepts one peer."""

    def __init__(self, kind: str, host: str = "127.0.0.1", port: int = 0, **kw):
        if kind not in ("datagram", "stream"):
            raise ValueError(f"listener kind must be datagram or stream, got {kind!r}")
        self.kind = kind
        self._kw = kw
        if kind == "datagram":
            self.sock = _udp_socket(host, port)
        else:
            self.sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            try:
                self.sock.bind((host, port))
                self.sock.listen(1)
            except OSError as exc:
                self.sock.close()
                raise ConnectError(f"cannot listen on tcp {host}:{port}: {exc}") from exc

    @property
    def address(self) -> tuple[str, int]:
        return self.sock.getsockname()

    def accept(self, timeout: float = 10.0) -> Endpoint:
        if self.kind == "stream":
            self.sock.settimeout(timeout)
            try:
                conn, _ = self.sock.accept()
            except socket.timeout:
                raise HandshakeTimeout("no stream peer connected") from None
            finally:
                self.sock.close()
            conn.settimeout(None)
            return StreamEndpoint(conn, **self._kw)
        # datagram: wait for HELLO, learn the peer address, answer
        deadline = time.monotonic() + timeout
        hello = encode_frame(_HELLO)
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                self.sock.close()
                raise HandshakeTimeout("no datagram peer said hello")
            self.sock.settimeout(remaining)
            try:
                raw, addr = self.sock.recvfrom(HEADER_SIZE + 0xFFFF)
            except socket.timeout:
                continue
            if raw == hello:
                self.sock.sendto(hello, addr)
                # the socket now belongs to the endpoint
                sock, self.sock = self.sock, None
                return DatagramEndpoint(sock, addr, **self._kw)

    def close(self):
        if self.sock is not None:
            self.sock.close()


def listen(kind: str, host: str = "127.0.0.1", port: int = 0, **kw) -> Listener:
    return Listener(kind, host, port, **kw)


def connect(kind: str, host: str, port: int, timeout: float = 10.0, **kw) -> Endpoint:
    """Connector-side role (the node that joins the listener)."""
    if kind == "stream":
        # a refused connection is retried: the listener may still be starting
        deadline = time.monotonic() + timeout
        while True:
            try:
                sock = socket.create_connection((host, port), timeout=max(0.01, deadline - time.monotonic()))
                break
            except ConnectionRefusedError as exc:
                if time.monotonic() >= deadline:
                    raise ConnectError(f"cannot connect to tcp {host}:{port}: {exc}") from exc
                time.sleep(min(0.05, max(0.0, deadline - time.monotonic())))
            except OSError as exc:
                raise ConnectError(f"cannot connect to tcp {host}:{port}: {exc}") from exc
        sock.settimeout(None)
        return StreamEndpoint(sock, **kw)
    if kind != "datagram":
        raise ValueError(f"connect kind must be datagram or stream, got {kind!r}")
    sock = _udp_socket(host, 0)
    peer = (host, port)
    hello = encode_frame(_HELLO)
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        try:
            sock.sendto(hello, peer)
        except OSError as exc:
            sock.close()
            raise ConnectError(f"cannot reach udp {host}:{port}: {exc}") from exc
        sock.settimeout(min(0.1, max(0.001, deadline - time.monotonic())))
        try:
            raw, addr = sock.recvfrom(HEADER_SIZE + 0xFFFF)
        except (socket.timeout, ConnectionRefusedError):
            continue
        if raw == hello and addr == peer:
            return DatagramEndpoint(sock, peer, **kw)
    sock.close()
    raise HandshakeTimeout(f"no hello answer from udp {host}:{port}")


def open_pair(
    kind: str,
    *,
    host: str = "127.0.0.1",
    profile: ProtocolProfile | None = None,
    faults_a: FaultInjector | None = None,
    faults_b: FaultInjector | None = None,
    timeout: float = 10.0,
) -> tuple[Endpoint, Endpoint]:
    """Two connected endpoints in this process: (node 1 / connector, node 2 / listener).

    For ``in_memory`` a ``profile`` caps the frame payload at the profile's
    max payload, which is how ESP-NOW and BLE links are emulated.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown endpoint kind {kind!r}; expected one of {KINDS}")
    max_payload = profile.chunk_limit if profile is not None else None
    if kind == "in_memory":
        ab: queue.Queue = queue.Queue()
        ba: queue.Queue = queue.Queue()
        a = InMemoryEndpoint(ba, ab, faults=faults_a, max_payload=max_payload)
        b = InMemoryEndpoint(ab, ba, faults=faults_b, max_payload=max_payload)
        return a, b
    listener = Listener(kind, host, 0, faults=faults_b, max_payload=max_payload)
    port = listener.address[1]
    accepted: dict[str, object] = {}

    def _accept():
        try:
            accepted["ep"] = listener.accept(timeout)
        except Exception as exc:  # surfaced below
            accepted["err"] = exc

    t = threading.Thread(target=_accept, daemon=True)
    t.start()
    try:
        a = connect(kind, host, port, timeout, faults=faults_a, max_payload=max_payload)
    except Exception:
        listener.close()
        t.join(timeout)
        raise
    t.join(timeout)
    if "err" in accepted:
        a.close()
        raise accepted["err"]
    return a, accepted["ep"]
