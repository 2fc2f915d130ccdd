"""Per-tensor affine int8 quantization.

real = scale * (q - zero_point), q in [-128, 127]. Rounding is half away from
zero everywhere so that independent implementations agree bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "QMIN",
    "QMAX",
    "Alignment",
    "QuantParams",
    "QuantTensor",
    "calibrate_params",
    "check_alignment",
    "dequantize",
    "quantize",
    "requantize",
    "round_half_away",
]

QMIN = -128
QMAX = 127

DEFAULT_ALIGNMENT_TOL = 1e-6


def round_half_away(x):
    """Round to nearest integer, ties away from zero (works on scalars and arrays)."""
    if isinstance(x, np.ndarray):
        return np.sign(x) * np.floor(np.abs(x) + 0.5)
    return math.copysign(math.floor(abs(x) + 0.5), x)


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int = 0

    def __post_init__(self):
        scale = float(self.scale)
        if not (scale > 0 and math.isfinite(scale)):
            raise ValueError(f"scale must be positive and finite, got {self.scale!r}")
        zp = self.zero_point
        if isinstance(zp, bool) or int(zp) != zp or not QMIN <= zp <= QMAX:
            raise ValueError(f"zero_point must be an int8 value, got {zp!r}")
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "zero_point", int(zp))

    @property
    def representable_range(self) -> tuple[float, float]:
        return self.scale * (QMIN - self.zero_point), self.scale * (QMAX - self.zero_point)

    def quantize_scalar(self, v: float) -> int:
        q = round_half_away(v / self.scale) + self.zero_point
        return int(min(max(q, QMIN), QMAX))


@dataclass(frozen=True, eq=False)
class QuantTensor:
    shape: tuple[int, ...]
    params: QuantParams
    data: np.ndarray  # flat int8

    def __post_init__(self):
        shape = tuple(int(d) for d in self.shape)
        data = np.asarray(self.data)
        if data.dtype != np.int8:
            if data.size and (data.min() < QMIN or data.max() > QMAX):
                raise ValueError("data outside int8 range")
            data = data.astype(np.int8)
        data = data.reshape(-1)
        if data.size != math.prod(shape):
            raise ValueError(f"data length {data.size} does not match shape {shape}")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "data", data)

    def __eq__(self, other):
        if not isinstance(other, QuantTensor):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.params == other.params
            and np.array_equal(self.data, other.data)
        )

    def tobytes(self) -> bytes:
        return self.data.tobytes()

    @classmethod
    def frombytes(cls, buf: bytes, shape: Sequence[int], params: QuantParams) -> "QuantTensor":
        return cls(tuple(shape), params, np.frombuffer(buf, dtype=np.int8).copy())


def calibrate_params(samples) -> QuantParams:
    """Asymmetric min/max calibration over a representative sample set."""
    x = np.asarray(samples, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ValueError("cannot calibrate from an empty sample set")
    lo, hi = float(x.min()), float(x.max())
    if hi > lo:
        scale = (hi - lo) / (QMAX - QMIN)
    else:
        scale = max(abs(lo), 1.0) / (QMAX - QMIN)
    zp = round_half_away(QMIN - lo / scale)
    zp = int(min(max(zp, QMIN), QMAX))
    return QuantParams(scale, zp)


def quantize(values, params: QuantParams) -> QuantTensor:
    v = np.asarray(values, dtype=np.float64)
    q = round_half_away(v / params.scale) + params.zero_point
    q = np.clip(q, QMIN, QMAX).astype(np.int8)
    return QuantTensor(v.shape, params, q.reshape(-1))


def dequantize(t: QuantTensor) -> np.ndarray:
    out = t.params.scale * (t.data.astype(np.float64) - t.params.zero_point)
    return out.reshape(t.shape)


@dataclass(frozen=True)
class Alignment:
    aligned: bool
    detail: str

    def __bool__(self):
        return self.aligned


def check_alignment(
    producer: QuantParams, consumer: QuantParams, rel_tol: float = DEFAULT_ALIGNMENT_TOL
) -> Alignment:
    """Whether Part-1 output params can feed Part-2 input bytes without requantizing."""
    if rel_tol < 0:
        raise ValueError("rel_tol must be >= 0")
    problems = []
    diff = abs(producer.scale - consumer.scale)
    if diff > rel_tol * producer.scale:
        problems.append(
            f"scale mismatch: producer {producer.scale!r} vs consumer {consumer.scale!r} "
            f"(relative diff {diff / producer.scale:.3g} > {rel_tol:g})"
        )
    if producer.zero_point != consumer.zero_point:
        problems.append(
            f"zero_point mismatch: producer {producer.zero_point} vs consumer {consumer.zero_point}"
        )
    if problems:
        return Alignment(False, "; ".join(problems))
    return Alignment(True, "aligned")


def requantize(t: QuantTensor, target: QuantParams) -> QuantTensor:
    return quantize(dequantize(t), target)
