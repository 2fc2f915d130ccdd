"""Chunked wire protocol: frames, endpoints and message transfer."""

from .endpoints import (
    ConnectError,
    Endpoint,
    EndpointClosed,
    FaultInjector,
    HandshakeTimeout,
    Listener,
    TransportError,
    connect,
    listen,
    open_pair,
)
from .frames import (
    HEADER_SIZE,
    MAGIC,
    BadMagicError,
    CrcMismatchError,
    Frame,
    FrameError,
    IntegrityError,
    MsgType,
    Reassembler,
    Reassembly,
    TruncatedFrameError,
    chunk_message,
    decode_frame,
    encode_frame,
    reassemble,
)
from .messages import ActivationMessage, FeedbackMessage, MessageError
from .transfer import (
    ReceiveResult,
    Reliability,
    TransferResult,
    TransferTimeout,
    receive_message,
    send_message,
    serve_until,
)

open_endpoint = open_pair

__all__ = [
    "ActivationMessage",
    "FeedbackMessage",
    "MessageError",
    "BadMagicError",
    "ConnectError",
    "CrcMismatchError",
    "Endpoint",
    "EndpointClosed",
    "FaultInjector",
    "Frame",
    "FrameError",
    "HEADER_SIZE",
    "HandshakeTimeout",
    "IntegrityError",
    "Listener",
    "MAGIC",
    "MsgType",
    "Reassembler",
    "Reassembly",
    "ReceiveResult",
    "Reliability",
    "TransferResult",
    "TransferTimeout",
    "TransportError",
    "TruncatedFrameError",
    "chunk_message",
    "connect",
    "decode_frame",
    "encode_frame",
    "listen",
    "open_pair",
    "reassemble",
    "receive_message",
    "send_message",
    "serve_until",
    "open_endpoint",
]
