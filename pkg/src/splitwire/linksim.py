"""Deterministic link timing model, least-squares calibration and RTT composition.

A transfer of ``b`` bytes in chunks of ``c`` bytes costs

    n * per_packet_ms + b * per_byte_ms,   n = ceil(b / c)

optionally multiplied by a stall factor once ``n`` exceeds a threshold (the
TCP buffer-exhaustion regime). Protocol setup and feedback constants are kept
on the model as well so that one file per protocol is enough to compose an RTT.
"""

from __future__ import annotations

import csv
import io
import json
import math
import random
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.optimize import nnls

from .planner import SplitPlan
from .protocols import PROFILES, ProtocolProfile, get_profile, packet_count

__all__ = [
    "Calibration",
    "DegenerateFitError",
    "LinkModel",
    "Measurement",
    "RTTBreakdown",
    "RankedRow",
    "Stall",
    "StageTimings",
    "calibrate",
    "compare_protocols",
    "estimate_rtt",
    "load_link_models",
    "read_measurements_csv",
    "save_link_models",
    "simulate_transfer",
]


class DegenerateFitError(ValueError):
    """Measurements cannot identify the latency coefficients."""


@dataclass(frozen=True)
class Stall:
    threshold_packets: int = 100
    stall_factor: float = 1.0

    def __post_init__(self):
        if self.threshold_packets < 0:
            raise ValueError("stall threshold must be >= 0")
        if not (self.stall_factor >= 1.0 and math.isfinite(self.stall_factor)):
            raise ValueError("stall_factor must be finite and >= 1")


@dataclass(frozen=True)
class LinkModel:
    per_packet_ms: float = 0.0
    per_byte_ms: float = 0.0
    setup_ms: float = 0.0
    feedback_ms: float = 0.0
    stall: Stall | None = None

    def __post_init__(self):
        for f in ("per_packet_ms", "per_byte_ms", "setup_ms", "feedback_ms"):
            v = float(getattr(self, f))
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"{f} must be finite and nonnegative, got {v!r}")
            object.__setattr__(self, f, v)

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.stall is None:
            d["stall"] = None
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "LinkModel":
        d = dict(d)
        stall = d.pop("stall", None)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown LinkModel fields: {sorted(unknown)}")
        return cls(**d, stall=Stall(**stall) if stall else None)


def simulate_transfer(
    nbytes: int,
    chunk_bytes: int,
    model: LinkModel,
    profile: ProtocolProfile | None = None,
    *,
    jitter: float = 0.0,
    rng: random.Random | None = None,
) -> float:
    """Predicted transfer latency in ms.

    ``jitter`` is a relative standard deviation applied with ``rng``; the
    default is fully deterministic.
    """
    if profile is not None:
        profile.check_chunk(chunk_bytes)
    n = packet_count(nbytes, chunk_bytes)
    latency = n * model.per_packet_ms + nbytes * model.per_byte_ms
    if model.stall is not None and n > model.stall.threshold_packets:
        latency *= model.stall.stall_factor
    if jitter:
        rng = rng or random.Random(0)
        latency = max(0.0, latency * (1.0 + rng.gauss(0.0, jitter)))
    return latency


# --- calibration ---------------------------------------------------------------

@dataclass(frozen=True)
class Measurement:
    payload_bytes: int
    chunk_bytes: int
    latency_ms: float
    protocol: str = ""

    @property
    def n_packets(self) -> int:
        return packet_count(self.payload_bytes, self.chunk_bytes)


@dataclass(frozen=True)
class Residual:
    measurement: Measurement
    predicted_ms: float
    used_in_fit: bool

    @property
    def relative(self) -> float:
        obs = self.measurement.latency_ms
        return (self.predicted_ms - obs) / obs if obs else math.inf


@dataclass(frozen=True)
class Calibration:
    model: LinkModel
    residuals: tuple[Residual, ...]
    fitted_per_byte: bool

    @property
    def max_relative_residual(self) -> float:
        fit = [abs(r.relative) for r in self.residuals if r.used_in_fit]
        return max(fit) if fit else 0.0

    def report(self) -> str:
        lines = [
            f"per_packet_ms={self.model.per_packet_ms:.6g} per_byte_ms={self.model.per_byte_ms:.6g}"
            + (
                f" stall(threshold={self.model.stall.threshold_packets}, factor={self.model.stall.stall_factor:.4g})"
                if self.model.stall else ""
            ),
            "payload_bytes,chunk_bytes,n_packets,observed_ms,predicted_ms,rel_residual,in_fit",
        ]
        for r in self.residuals:
            m = r.measurement
            lines.append(
                f"{m.payload_bytes},{m.chunk_bytes},{m.n_packets},{m.latency_ms:.6g},"
                f"{r.predicted_ms:.6g},{r.relative:+.4f},{int(r.used_in_fit)}"
            )
        return "\n".join(lines)


def calibrate(
    measurements: Iterable[Measurement | tuple],
    *,
    stall_threshold: int | None = None,
    setup_ms: float = 0.0,
    feedback_ms: float = 0.0,
) -> Calibration:
    """Fit per-packet (and, when identifiable, per-byte) cost to observed latencies.

    Residuals are relative (each row weighted by 1/observed) because
    latencies span several orders of magnitude. With a single chunk size the
    byte count is almost exactly ``chunk * n`` so per-byte cost is not
    identifiable and only the per-packet term is fitted. Coefficients are
    constrained nonnegative.

    Rows with more than ``stall_threshold`` packets are left out of the fit
    and instead determine the stall factor.
    """
    rows = [m if isinstance(m, Measurement) else Measurement(*m) for m in measurements]
    if len(rows) < 2:
        raise DegenerateFitError("need at least two measurements")
    for m in rows:
        if m.payload_bytes <= 0 or m.latency_ms <= 0:
            raise DegenerateFitError(f"measurement {m} has no payload or no latency")

    def stalled(m: Measurement) -> bool:
        return stall_threshold is not None and m.n_packets > stall_threshold

    fit_rows = [m for m in rows if not stalled(m)]
    if len(fit_rows) < 2:
        raise DegenerateFitError("fewer than two rows remain after excluding stalled rows")
    if len({m.n_packets for m in fit_rows}) < 2:
        raise DegenerateFitError("all rows have the same packet count")

    fit_bytes = len({m.chunk_bytes for m in fit_rows}) > 1
    n = np.array([m.n_packets for m in fit_rows], dtype=float)
    b = np.array([m.payload_bytes for m in fit_rows], dtype=float)
    y = np.array([m.latency_ms for m in fit_rows], dtype=float)
    w = 1.0 / y
    if fit_bytes:
        # scale the byte column so both columns are O(1) for the solver
        bscale = float(b.max())
        A = np.column_stack([n * w, b / bscale * w])
        coef, _ = nnls(A, y * w)
        per_packet, per_byte = float(coef[0]), float(coef[1]) / bscale
    else:
        per_packet = float(np.dot(n * w, y * w) / np.dot(n * w, n * w))
        per_byte = 0.0

    base = LinkModel(per_packet, per_byte, setup_ms, feedback_ms)
    stall = None
    if stall_threshold is not None:
        ratios = [
            m.latency_ms / simulate_transfer(m.payload_bytes, m.chunk_bytes, base)
            for m in rows if stalled(m)
        ]
        factor = math.exp(sum(math.log(r) for r in ratios) / len(ratios)) if ratios else 1.0
        stall = Stall(stall_threshold, max(1.0, factor))
    model = replace(base, stall=stall)

    residuals = tuple(
        Residual(m, simulate_transfer(m.payload_bytes, m.chunk_bytes, model), not stalled(m))
        for m in rows
    )
    return Calibration(model, residuals, fit_bytes)


def read_measurements_csv(source: str | Path | io.TextIOBase) -> list[Measurement]:
    """Parse ``protocol,chunk_bytes,payload_bytes,latency_ms`` rows."""
    if isinstance(source, (str, Path)):
        text = Path(source).read_text()
    else:
        text = source.read()
    reader = csv.DictReader(io.StringIO(text))
    required = {"protocol", "chunk_bytes", "payload_bytes", "latency_ms"}
    if reader.fieldnames is None or not required <= set(reader.fieldnames):
        raise ValueError(f"measurement CSV needs columns {sorted(required)}")
    out = []
    for line, row in enumerate(reader, start=2):
        try:
            out.append(Measurement(
                payload_bytes=int(row["payload_bytes"]),
                chunk_bytes=int(row["chunk_bytes"]),
                latency_ms=float(row["latency_ms"]),
                protocol=row["protocol"].strip(),
            ))
        except (TypeError, ValueError) as exc:
            raise ValueError(f"line {line}: {exc}") from None
    return out


def save_link_models(models: Mapping[str, LinkModel], path: str | Path) -> None:
    doc = {"link_models": {name: m.to_dict() for name, m in sorted(models.items())}}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_link_models(path: str | Path) -> dict[str, LinkModel]:
    doc = json.loads(Path(path).read_text())
    entries = doc.get("link_models", doc)
    return {get_profile(name).name: LinkModel.from_dict(m) for name, m in entries.items()}


# --- RTT composition -----------------------------------------------------------

@dataclass(frozen=True)
class StageTimings:
    """Per-stage processing constants in ms.

    ``setup_ms`` and ``feedback_ms`` default to None, meaning "take the
    protocol's value from its LinkModel".
    """
    model_load_1_ms: float = 0.0001
    model_load_2_ms: float = 0.01
    input_load_ms: float = 9.8
    tensor_alloc_1_ms: float = 43.0
    tensor_alloc_2_ms: float = 10.0
    inference_1_ms: float = 3053.75
    inference_2_ms: float = 437.0
    buffering_ms: float = 0.02
    setup_ms: float | None = None
    feedback_ms: float | None = None

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            if not (float(v) >= 0 and math.isfinite(v)):
                raise ValueError(f"{f.name} must be finite and nonnegative")

    @classmethod
    def zeros(cls) -> "StageTimings":
        return cls(**{f.name: 0.0 for f in fields(cls)})

    @classmethod
    def from_dict(cls, d: Mapping) -> "StageTimings":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown stage fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


# Stage labels follow the measurement table row names.
RTT_STAGES = (
    "Protocol setup",
    "Model loading (device 1)",
    "Input loading",
    "Tensors allocation (device 1)",
    "Inference (device 1)",
    "Intermediate activations buffering",
    "Transmission",
    "Model loading (device 2)",
    "Tensors allocation (device 2)",
    "Inference (device 2)",
    "Feedback delay",
)


@dataclass(frozen=True)
class RTTBreakdown:
    protocol: str
    chunk_bytes: int
    n_packets: int
    entries: tuple[tuple[str, float], ...]

    @property
    def total_ms(self) -> float:
        total = 0.0
        for _, ms in self.entries:
            total += ms
        return total

    def get(self, stage: str) -> float:
        return dict(self.entries)[stage]

    def as_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "chunk_bytes": self.chunk_bytes,
            "n_packets": self.n_packets,
            "stages": [{"stage": s, "ms": ms} for s, ms in self.entries],
            "rtt_ms": self.total_ms,
        }


def estimate_rtt(
    plan: SplitPlan,
    protocol: ProtocolProfile,
    link: LinkModel,
    stages: StageTimings,
    chunk_bytes: int | None = None,
) -> RTTBreakdown:
    chunk = protocol.default_chunk_bytes if chunk_bytes is None else chunk_bytes
    transfer = simulate_transfer(plan.boundary_bytes, chunk, link, protocol)
    setup = link.setup_ms if stages.setup_ms is None else stages.setup_ms
    feedback = link.feedback_ms if stages.feedback_ms is None else stages.feedback_ms
    values = (
        setup,
        stages.model_load_1_ms,
        stages.input_load_ms,
        stages.tensor_alloc_1_ms,
        stages.inference_1_ms,
        stages.buffering_ms,
        transfer,
        stages.model_load_2_ms,
        stages.tensor_alloc_2_ms,
        stages.inference_2_ms,
        feedback,
    )
    return RTTBreakdown(
        protocol.name,
        chunk,
        packet_count(plan.boundary_bytes, chunk),
        tuple(zip(RTT_STAGES, (float(v) for v in values))),
    )


@dataclass(frozen=True)
class RankedRow:
    rank: int
    protocol: str
    chunk_bytes: int
    n_packets: int
    transfer_ms: float
    rtt_ms: float
    breakdown: RTTBreakdown = field(repr=False)

    def as_dict(self) -> dict:
        return {
            "rank": self.rank,
            "protocol": self.protocol,
            "chunk_bytes": self.chunk_bytes,
            "n_packets": self.n_packets,
            "transfer_ms": self.transfer_ms,
            "rtt_ms": self.rtt_ms,
            "stages": self.breakdown.as_dict()["stages"],
        }


def compare_protocols(
    plan: SplitPlan,
    links: Mapping[str, LinkModel],
    stages: StageTimings | Mapping[str, StageTimings] | None = None,
    chunks: Mapping[str, int] | None = None,
    *,
    transfer_only: bool = False,
) -> list[RankedRow]:
    """Rank protocols by estimated RTT (or by transfer latency alone).

    Ties are broken alphabetically by protocol name.
    """
    if len(links) < 2:
        raise ValueError("compare_protocols needs at least two protocols")
    rows = []
    for name, link in links.items():
        profile = PROFILES.get(name) or get_profile(name)
        st = stages.get(name, StageTimings()) if isinstance(stages, Mapping) else (stages or StageTimings())
        chunk = (chunks or {}).get(name, profile.default_chunk_bytes)
        bd = estimate_rtt(plan, profile, link, st, chunk)
        transfer = bd.get("Transmission")
        rows.append((transfer if transfer_only else bd.total_ms, name, bd, transfer))
    rows.sort(key=lambda r: (r[0], r[1]))
    return [
        RankedRow(i + 1, name, bd.chunk_bytes, bd.n_packets, transfer, bd.total_ms, bd)
        for i, (_, name, bd, transfer) in enumerate(rows)
    ]


def format_ranking(rows: Sequence[RankedRow]) -> str:
    header = f"{'rank':<5}{'protocol':<10}{'chunk B':>8}{'packets':>9}{'transfer ms':>14}{'RTT ms':>12}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(
            f"{r.rank:<5}{r.protocol:<10}{r.chunk_bytes:>8}{r.n_packets:>9}"
            f"{r.transfer_ms:>14.3f}{r.rtt_ms:>12.3f}"
        )
    return "\n".join(lines)


def format_breakdown(bd: RTTBreakdown) -> str:
    width = max(len(s) for s, _ in bd.entries)
    lines = [f"{bd.protocol} (chunk {bd.chunk_bytes} B, {bd.n_packets} packets)"]
    for stage, ms in bd.entries:
        lines.append(f"  {stage:<{width}}  {ms:>12.4f} ms")
    lines.append(f"  {'RTT':<{width}}  {bd.total_ms:>12.4f} ms")
    return "\n".join(lines)
