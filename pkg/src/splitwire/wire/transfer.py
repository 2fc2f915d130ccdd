"""Message transfer over an endpoint: best-effort or stop-and-wait ARQ."""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass

from .endpoints import Endpoint, EndpointClosed, TransportError
from .frames import Frame, MsgType, Reassembler, Reassembly, chunk_message

__all__ = [
    "ReceiveResult",
    "Reliability",
    "TransferResult",
    "TransferTimeout",
    "receive_message",
    "send_message",
    "serve_until",
]


class TransferTimeout(TransportError):
    def __init__(self, msg: str, partial: Reassembly | None = None):
        super().__init__(msg)
        self.partial = partial


class Reliability(str, enum.Enum):
    NONE = "none"
    STOP_AND_WAIT = "stop_and_wait"


@dataclass(frozen=True)
class TransferResult:
    bytes_sent: int
    frames_sent: int
    retransmissions: int
    started: float
    send_completed: float

    @property
    def wall_time(self) -> float:
        return self.send_completed - self.started

    @property
    def data_frames(self) -> int:
        return self.frames_sent - self.retransmissions


@dataclass(frozen=True)
class ReceiveResult:
    reassembly: Reassembly
    frames_received: int
    started: float
    first_frame: float
    reassembled: float

    @property
    def data(self) -> bytes | None:
        return self.reassembly.data

    @property
    def complete(self) -> bool:
        return self.reassembly.complete

    @property
    def missing(self) -> frozenset[int]:
        return self.reassembly.missing


def _ack_for(frame: Frame) -> Frame:
    return Frame(MsgType.ACK, frame.tensor_id, frame.seq, frame.total, bytes([int(frame.msg_type)]))


def _is_ack_of(ack: Frame, frame: Frame) -> bool:
    return (
        ack.msg_type is MsgType.ACK
        and ack.tensor_id == frame.tensor_id
        and ack.seq == frame.seq
        and ack.total == frame.total
        and ack.payload == bytes([int(frame.msg_type)])
    )


def _service_stale(ep: Endpoint, frame: Frame) -> bool:
    """Re-ACK a retransmission of an already completed message.

    Returns True if the frame was consumed.
    """
    key = (int(frame.msg_type), frame.tensor_id)
    if key in ep.completed:
        if ep.completed[key]:
            ep.send_frame(_ack_for(frame))
        return True
    return False


def send_message(
    ep: Endpoint,
    msg: bytes,
    chunk_bytes: int,
    reliability: Reliability | str = Reliability.NONE,
    *,
    tensor_id: int = 0,
    msg_type: MsgType = MsgType.ACTIVATION,
    ack_timeout: float = 0.1,
    max_retries: int = 50,
) -> TransferResult:
    """Chunk ``msg`` and push it through ``ep``.

    With stop-and-wait each frame is retransmitted every ``ack_timeout``
    seconds until acknowledged, at most ``max_retries`` times.
    """
    reliability = Reliability(reliability)
    frames = chunk_message(msg, chunk_bytes, tensor_id, msg_type)
    started = time.perf_counter()
    sent = retrans = 0
    if reliability is Reliability.NONE:
        for f in frames:
            ep.send_frame(f)
            sent += 1
        ep.flush()
        return TransferResult(len(msg), sent, 0, started, time.perf_counter())

    for f in frames:
        attempts = 0
        while True:
            ep.send_frame(f)
            sent += 1
            ep.flush()
            deadline = time.monotonic() + ack_timeout
            acked = False
            while not acked:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    break
                reply = ep.recv_frame(remaining)
                if reply is None:
                    break
                if reply.msg_type is MsgType.ACK:
                    acked = _is_ack_of(reply, f)
                elif not _service_stale(ep, reply):
                    # the peer already started talking; keep it for later
                    ep.backlog.append(reply)
                    if len(ep.backlog) > 4 * len(frames) + 64:
                        raise TransportError("receive backlog overflow while awaiting ACKs")
            if acked:
                break
            attempts += 1
            if attempts > max_retries:
                raise TransferTimeout(
                    f"frame {f.seq}/{f.total} of tensor {tensor_id} not acknowledged "
                    f"after {max_retries} retries"
                )
            retrans += 1
    return TransferResult(len(msg), sent, retrans, started, time.perf_counter())


def receive_message(
    ep: Endpoint,
    reliability: Reliability | str = Reliability.NONE,
    *,
    msg_type: MsgType | None = None,
    timeout: float = 10.0,
    idle_timeout: float = 0.25,
    linger: float = 0.0,
) -> ReceiveResult:
    """Receive one message.

    ``timeout`` bounds the wait for the first frame and, under stop-and-wait,
    the gap between frames. Best-effort receives give up ``idle_timeout``
    seconds after the last frame and return whatever gaps remain. ``linger``
    keeps re-acknowledging duplicates after completion (useful when this is
    the last exchange and the final ACK may be lost).
    """
    reliability = Reliability(reliability)
    ack = reliability is Reliability.STOP_AND_WAIT
    asm = Reassembler()
    deferred: list[Frame] = []
    started = time.perf_counter()
    first = None
    received = 0
    try:
        while not asm.complete:
            wait = timeout if (first is None or ack) else idle_timeout
            frame = ep.recv_frame(wait)
            if frame is None:
                if first is None:
                    raise TransferTimeout(f"no frame within {timeout}s")
                if ack:
                    raise TransferTimeout("sender went silent mid-transfer", asm.result())
                break
            if frame.msg_type is MsgType.ACK:
                continue
            if _service_stale(ep, frame):
                continue
            if (msg_type is not None and frame.msg_type is not msg_type) or (
                asm.tensor_id is not None
                and (frame.tensor_id != asm.tensor_id or frame.msg_type is not asm.msg_type)
            ):
                deferred.append(frame)
                continue
            if first is None:
                first = time.perf_counter()
            received += 1
            asm.add(frame)
            if ack:
                ep.send_frame(_ack_for(frame))
        done = time.perf_counter()
        result = asm.result()
        if result.complete:
            ep.completed[(int(asm.msg_type), asm.tensor_id)] = ack
            if linger > 0:
                _linger(ep, linger, deferred)
        return ReceiveResult(result, received, started, first, done)
    finally:
        ep.backlog.extend(deferred)


def _linger(ep: Endpoint, quiet: float, deferred: list[Frame]) -> None:
    while True:
        try:
            frame = ep.recv_frame(quiet)
        except EndpointClosed:
            return
        if frame is None:
            return
        if frame.msg_type is MsgType.ACK or _service_stale(ep, frame):
            continue
        deferred.append(frame)


def serve_until(ep: Endpoint, done, poll: float = 0.005) -> None:
    """Keep re-acknowledging stale frames until ``done()`` is true.

    An in-process alternative to ``linger`` when the caller can observe the
    sender finishing.
    """
    deferred: list[Frame] = []
    try:
        while not done():
            try:
                frame = ep.recv_frame(poll)
            except EndpointClosed:
                return
            if frame is None or frame.msg_type is MsgType.ACK or _service_stale(ep, frame):
                continue
            deferred.append(frame)
    finally:
        ep.backlog.extend(deferred)
