"""Application messages carried inside chunked frames (little-endian)."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..quant import QuantParams, QuantTensor

__all__ = ["ActivationMessage", "FeedbackMessage", "MessageError"]


class MessageError(ValueError):
    pass


# tensor_id I, ndim B, dims H*ndim, scale f, zero_point b, data
_ACT_HEAD = struct.Struct("<IB")
_ACT_PARAMS = struct.Struct("<fb")
# tensor_id I, count H, then count * (class_id H, confidence f)
_FB_HEAD = struct.Struct("<IH")
_FB_ENTRY = struct.Struct("<Hf")


@dataclass(frozen=True, eq=False)
class ActivationMessage:
    tensor_id: int
    tensor: QuantTensor

    def encode_header(self) -> bytes:
        """Shape and quantization parameters without the tensor body."""
        t = self.tensor
        if len(t.shape) > 255 or any(d > 0xFFFF for d in t.shape):
            raise MessageError(f"shape {t.shape} not encodable")
        return (
            _ACT_HEAD.pack(self.tensor_id, len(t.shape))
            + struct.pack(f"<{len(t.shape)}H", *t.shape)
            + _ACT_PARAMS.pack(t.params.scale, t.params.zero_point)
        )

    def encode(self) -> bytes:
        return self.encode_header() + self.tensor.tobytes()

    @staticmethod
    def decode_header(buf: bytes) -> tuple[int, tuple[int, ...], QuantParams, int]:
        """Returns (tensor_id, shape, params, header length)."""
        try:
            tensor_id, ndim = _ACT_HEAD.unpack_from(buf)
            off = _ACT_HEAD.size
            shape = struct.unpack_from(f"<{ndim}H", buf, off)
            off += 2 * ndim
            scale, zp = _ACT_PARAMS.unpack_from(buf, off)
            off += _ACT_PARAMS.size
        except struct.error as exc:
            raise MessageError(f"truncated activation message: {exc}") from None
        try:
            params = QuantParams(scale, zp)
        except ValueError as exc:
            raise MessageError(str(exc)) from None
        return tensor_id, tuple(shape), params, off

    @classmethod
    def decode(cls, buf: bytes) -> "ActivationMessage":
        tensor_id, shape, params, off = cls.decode_header(buf)
        data = buf[off:]
        if len(data) != math.prod(shape):
            raise MessageError(f"activation data {len(data)} B does not match shape {shape}")
        return cls(tensor_id, QuantTensor.frombytes(data, shape, params))


@dataclass(frozen=True)
class FeedbackMessage:
    tensor_id: int
    predictions: tuple[tuple[int, float], ...]

    def __post_init__(self):
        preds = tuple((int(c), float(p)) for c, p in self.predictions)
        for c, p in preds:
            if not 0 <= c <= 0xFFFF:
                raise MessageError(f"class id {c} out of range")
            if not 0.0 <= p <= 1.0:
                raise MessageError(f"confidence {p} outside [0, 1]")
        object.__setattr__(self, "predictions", preds)

    def encode(self) -> bytes:
        out = [_FB_HEAD.pack(self.tensor_id, len(self.predictions))]
        out.extend(_FB_ENTRY.pack(c, p) for c, p in self.predictions)
        return b"".join(out)

    @classmethod
    def decode(cls, buf: bytes) -> "FeedbackMessage":
        try:
            tensor_id, count = _FB_HEAD.unpack_from(buf)
        except struct.error:
            raise MessageError("truncated feedback message") from None
        if len(buf) != _FB_HEAD.size + count * _FB_ENTRY.size:
            raise MessageError("feedback length does not match entry count")
        preds = [_FB_ENTRY.unpack_from(buf, _FB_HEAD.size + i * _FB_ENTRY.size) for i in range(count)]
        return cls(tensor_id, tuple(preds))

    @classmethod
    def from_scores(cls, tensor_id: int, ranked: Sequence[tuple[int, float]]) -> "FeedbackMessage":
        # confidences travel as float32
        return cls(tensor_id, tuple((c, float(np.float32(p))) for c, p in ranked))
