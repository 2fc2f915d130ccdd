"""Chunk frames: encoding, chunking and reassembly.

Frame layout (little-endian), 18-byte header followed by the payload::

    magic      2s   b"SL"
    version    B    1
    msg_type   B    MsgType
    tensor_id  I
    seq        H    0-based
    total      H
    payload_len H
    crc32      I    IEEE CRC-32 over the 14 header bytes before it + payload
"""

from __future__ import annotations

import enum
import struct
import zlib
from dataclasses import dataclass, field
from typing import Iterable

from ..protocols import packet_count

__all__ = [
    "BadMagicError",
    "CrcMismatchError",
    "Frame",
    "FrameError",
    "HEADER_SIZE",
    "IntegrityError",
    "MAGIC",
    "MsgType",
    "Reassembler",
    "Reassembly",
    "TruncatedFrameError",
    "chunk_message",
    "decode_frame",
    "encode_frame",
    "reassemble",
]

MAGIC = b"SL"
VERSION = 1

_PREFIX = struct.Struct("<2sBBIHHH")
_CRC = struct.Struct("<I")
HEADER_SIZE = _PREFIX.size + _CRC.size
MAX_TOTAL = 0xFFFF


class MsgType(enum.IntEnum):
    ACTIVATION = 1
    FEEDBACK = 2
    ACK = 3
    OTA_DATA = 4


class FrameError(ValueError):
    pass


class BadMagicError(FrameError):
    pass


class CrcMismatchError(FrameError):
    pass


class TruncatedFrameError(FrameError):
    pass


class IntegrityError(ValueError):
    """Two frames claim the same position with different contents."""


@dataclass(frozen=True)
class Frame:
    msg_type: MsgType
    tensor_id: int
    seq: int
    total: int
    payload: bytes = b""
    version: int = VERSION

    def __post_init__(self):
        object.__setattr__(self, "msg_type", MsgType(self.msg_type))
        object.__setattr__(self, "payload", bytes(self.payload))
        if not 0 <= self.tensor_id <= 0xFFFFFFFF:
            raise FrameError(f"tensor_id out of range: {self.tensor_id}")
        if not 0 <= self.total <= MAX_TOTAL:
            raise FrameError(f"total out of range: {self.total}")
        if self.msg_type is not MsgType.ACK and not 0 <= self.seq < self.total:
            raise FrameError(f"seq {self.seq} not below total {self.total}")
        if not 0 <= self.seq <= MAX_TOTAL:
            raise FrameError(f"seq out of range: {self.seq}")
        if len(self.payload) > 0xFFFF:
            raise FrameError("payload longer than 65535 bytes")

    @property
    def payload_len(self) -> int:
        return len(self.payload)


def encode_frame(f: Frame) -> bytes:
    prefix = _PREFIX.pack(MAGIC, f.version, int(f.msg_type), f.tensor_id, f.seq, f.total, len(f.payload))
    crc = zlib.crc32(f.payload, zlib.crc32(prefix))
    return prefix + _CRC.pack(crc) + f.payload


def peek_payload_len(header: bytes) -> int:
    """Payload length from a raw header; used by stream readers."""
    if len(header) < HEADER_SIZE:
        raise TruncatedFrameError(f"need {HEADER_SIZE} header bytes, got {len(header)}")
    magic, *_rest, payload_len = _PREFIX.unpack_from(header)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    return payload_len


def decode_frame(buf: bytes) -> Frame:
    buf = bytes(buf)
    if len(buf) < HEADER_SIZE:
        raise TruncatedFrameError(f"frame shorter than header ({len(buf)} < {HEADER_SIZE})")
    magic, version, msg_type, tensor_id, seq, total, payload_len = _PREFIX.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    (crc,) = _CRC.unpack_from(buf, _PREFIX.size)
    payload = buf[HEADER_SIZE:]
    if len(payload) < payload_len:
        raise TruncatedFrameError(f"payload truncated ({len(payload)} < {payload_len})")
    if len(payload) > payload_len:
        raise FrameError(f"{len(payload) - payload_len} trailing bytes after payload")
    if zlib.crc32(payload, zlib.crc32(buf[: _PREFIX.size])) != crc:
        raise CrcMismatchError("CRC-32 mismatch")
    try:
        return Frame(MsgType(msg_type), tensor_id, seq, total, payload, version)
    except ValueError as exc:
        raise FrameError(str(exc)) from None


def chunk_message(
    msg: bytes,
    chunk_bytes: int,
    tensor_id: int = 0,
    msg_type: MsgType = MsgType.ACTIVATION,
) -> list[Frame]:
    """Split ``msg`` into frames of at most ``chunk_bytes`` payload each.

    An empty message still produces one empty frame so the receiver learns
    that it is complete.
    """
    if chunk_bytes < 1:
        raise ValueError("chunk_bytes must be >= 1")
    if chunk_bytes > 0xFFFF:
        raise ValueError("chunk_bytes must fit the 16-bit payload_len field")
    msg = bytes(msg)
    total = max(1, packet_count(len(msg), chunk_bytes))
    if total > MAX_TOTAL:
        raise ValueError(
            f"{len(msg)} bytes at {chunk_bytes} B/chunk needs {total} frames (max {MAX_TOTAL})"
        )
    return [
        Frame(msg_type, tensor_id, i, total, msg[i * chunk_bytes : (i + 1) * chunk_bytes])
        for i in range(total)
    ]


@dataclass(frozen=True)
class Reassembly:
    tensor_id: int
    total: int
    data: bytes | None
    missing: frozenset[int] = frozenset()
    duplicates: int = 0

    @property
    def complete(self) -> bool:
        return self.data is not None


@dataclass
class Reassembler:
    """Incremental, order- and duplicate-insensitive reassembly of one message."""

    tensor_id: int | None = None
    total: int | None = None
    msg_type: MsgType | None = None
    duplicates: int = 0
    _parts: dict[int, bytes] = field(default_factory=dict)

    def add(self, frame: Frame) -> bool:
        """Store ``frame``; returns False if it was a duplicate."""
        if self.tensor_id is None:
            self.tensor_id, self.total, self.msg_type = frame.tensor_id, frame.total, frame.msg_type
        elif frame.tensor_id != self.tensor_id or frame.total != self.total:
            raise IntegrityError(
                f"frame for tensor {frame.tensor_id}/{frame.total} mixed into "
                f"tensor {self.tensor_id}/{self.total}"
            )
        prev = self._parts.get(frame.seq)
        if prev is not None:
            if prev != frame.payload:
                raise IntegrityError(f"conflicting payloads for seq {frame.seq}")
            self.duplicates += 1
            return False
        self._parts[frame.seq] = frame.payload
        return True

    @property
    def received(self) -> int:
        return len(self._parts)

    @property
    def complete(self) -> bool:
        return self.total is not None and len(self._parts) == self.total

    def missing(self) -> frozenset[int]:
        if self.total is None:
            return frozenset()
        return frozenset(set(range(self.total)) - self._parts.keys())

    def result(self) -> Reassembly:
        if self.total is None:
            raise ValueError("no frames received")
        data = b"".join(self._parts[i] for i in range(self.total)) if self.complete else None
        return Reassembly(self.tensor_id, self.total, data, self.missing(), self.duplicates)


def reassemble(frames: Iterable[Frame]) -> Reassembly:
    r = Reassembler()
    for f in frames:
        r.add(f)
    return r.result()
