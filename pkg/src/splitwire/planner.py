"""Two-part split plans and per-protocol packet/latency reports."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import TYPE_CHECKING, Mapping, Sequence

from .catalog import ModelGraph, activation_bytes
from .protocols import ChunkSizeError, ProtocolProfile, packet_count

if TYPE_CHECKING:
    from .linksim import LinkModel

__all__ = [
    "PlanError",
    "ReportRow",
    "SplitPlan",
    "format_report",
    "packet_count",
    "plan_report",
    "report_to_csv",
    "split",
]

REPORT_COLUMNS = ("split_layer", "protocol", "chunk_bytes", "n_packets", "predicted_latency_ms")


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class SplitPlan:
    graph_name: str
    split_layer: str
    part1_layers: tuple[str, ...]
    part2_layers: tuple[str, ...]
    boundary_bytes: int
    part1_bytes: int | None = None
    part2_bytes: int | None = None


def split(graph: ModelGraph, layer: str) -> SplitPlan:
    """Cut ``graph`` after ``layer``; Part 1 ends with the split layer."""
    i = graph.index(layer)
    if i == len(graph) - 1:
        raise PlanError(f"cannot split after the final layer {layer!r}: Part 2 would be empty")
    names = graph.layer_names
    spec = graph.layers[i]
    return SplitPlan(
        graph_name=graph.model_name,
        split_layer=layer,
        part1_layers=tuple(names[: i + 1]),
        part2_layers=tuple(names[i + 1 :]),
        boundary_bytes=activation_bytes(graph, layer, 1),
        part1_bytes=spec.part1_bytes,
        part2_bytes=spec.part2_bytes,
    )


@dataclass(frozen=True)
class ReportRow:
    split_layer: str
    protocol: str
    chunk_bytes: int
    n_packets: int | None
    predicted_latency_ms: float | None = None
    error: str | None = None

    def as_dict(self) -> dict:
        return {
            "split_layer": self.split_layer,
            "protocol": self.protocol,
            "chunk_bytes": self.chunk_bytes,
            "n_packets": self.n_packets,
            "predicted_latency_ms": self.predicted_latency_ms,
            "error": self.error,
        }


def plan_report(
    plan: SplitPlan,
    profiles: Sequence[ProtocolProfile],
    chunk_sizes: Mapping[str, Sequence[int]] | Sequence[int] | None = None,
    links: Mapping[str, LinkModel] | None = None,
) -> list[ReportRow]:
    """One row per (protocol, chunk size).

    ``chunk_sizes`` is either one list applied to every profile or a mapping
    from profile name to its own list; omitted profiles use their default
    chunk. Rows whose chunk exceeds the profile limit carry ``error`` instead
    of a packet count.
    """
    from .linksim import simulate_transfer

    rows = []
    for profile in profiles:
        if chunk_sizes is None:
            chunks: Sequence[int] = [profile.default_chunk_bytes]
        elif isinstance(chunk_sizes, Mapping):
            chunks = chunk_sizes.get(profile.name, [profile.default_chunk_bytes])
        else:
            chunks = chunk_sizes
        for chunk in chunks:
            try:
                profile.check_chunk(chunk)
            except ChunkSizeError as exc:
                rows.append(ReportRow(plan.split_layer, profile.name, chunk, None, None, str(exc)))
                continue
            n = packet_count(plan.boundary_bytes, chunk)
            latency = None
            if links is not None and profile.name in links:
                latency = simulate_transfer(plan.boundary_bytes, chunk, links[profile.name], profile)
            rows.append(ReportRow(plan.split_layer, profile.name, chunk, n, latency))
    return rows


def _fmt_latency(v: float | None) -> str:
    return "" if v is None else f"{v:.3f}"


def report_to_csv(rows: Sequence[ReportRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for r in rows:
        if r.error:
            continue
        writer.writerow([r.split_layer, r.protocol, r.chunk_bytes, r.n_packets, _fmt_latency(r.predicted_latency_ms)])
    return buf.getvalue()


def format_report(rows: Sequence[ReportRow]) -> str:
    """Aligned text table; error rows are shown with their message."""
    header = ["split layer", "protocol", "chunk B", "packets", "latency ms"]
    body = []
    for r in rows:
        if r.error:
            body.append([r.split_layer, r.protocol, str(r.chunk_bytes), "-", f"error: {r.error}"])
        else:
            body.append([
                r.split_layer, r.protocol, str(r.chunk_bytes),
                f"{r.n_packets} packets", _fmt_latency(r.predicted_latency_ms) or "-",
            ])
    widths = [max(len(h), *(len(b[i]) for b in body)) if body else len(h) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    for b in body:
        lines.append("  ".join(c.ljust(w) for c, w in zip(b, widths)).rstrip())
    return "\n".join(lines)

