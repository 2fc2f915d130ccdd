"""Reference measurements from the two-node ESP32-S3 testbed.

These are the numbers behind ``--paper-defaults``: transfer latencies per
split layer, protocol and chunk size, per-protocol setup/feedback costs, and
the measured round-trip times. Link models derived from them are calibrated
here, not hard-coded.
"""

from __future__ import annotations

from functools import lru_cache

from .linksim import Calibration, LinkModel, Measurement, StageTimings, calibrate

# layer -> int8 boundary tensor size
BOUNDARY_BYTES = {
    "block_2_expand": 150528,
    "block_15_project": 2744,
    "block_16_project_BN": 5488,
}

# (protocol, chunk) -> {layer: (latency_ms, reported packet count)}
TRANSFER_TABLE: dict[tuple[str, int], dict[str, tuple[float, int]]] = {
    ("UDP", 1472): {"block_2_expand": (145.1, 103), "block_15_project": (2.26, 2), "block_16_project_BN": (5.2, 4)},
    ("UDP", 1460): {"block_2_expand": (83.9, 104), "block_15_project": (1.4, 2), "block_16_project_BN": (3.2, 4)},
    ("UDP", 1200): {"block_2_expand": (98.3, 126), "block_15_project": (2.2, 3), "block_16_project_BN": (3.7, 5)},
    ("TCP", 1472): {"block_2_expand": (558.7, 103), "block_15_project": (8.6, 2), "block_16_project_BN": (19.2, 4)},
    ("TCP", 1460): {"block_2_expand": (563.3, 104), "block_15_project": (8.5, 2), "block_16_project_BN": (19.3, 4)},
    ("TCP", 1200): {"block_2_expand": (393.9, 126), "block_15_project": (8.8, 3), "block_16_project_BN": (15.719, 5)},
    ("ESP_NOW", 250): {"block_2_expand": (1897.0, 603), "block_15_project": (34.6, 11), "block_16_project_BN": (69.2, 22)},
    ("BLE", 512): {"block_2_expand": (7305.94, 603), "block_15_project": (148.9, 11), "block_16_project_BN": (272.9, 11)},
}

SETUP_MS = {"UDP": 2134.9, "TCP": 2590.623, "ESP_NOW": 48.0, "BLE": 6378.52}
FEEDBACK_MS = {"UDP": 0.649, "TCP": 2.645, "ESP_NOW": 1.115, "BLE": 24.550}
REPORTED_RTT_MS = {"UDP": 5800.0, "TCP": 6202.2, "ESP_NOW": 3662.0, "BLE": 10443.55}

# TCP transfers above this many packets stalled on the ESP32 TCP buffer.
TCP_STALL_THRESHOLD = 100

# Chunk size whose rows calibrate each protocol's default link model.
CALIBRATION_CHUNK = {"UDP": 1460, "TCP": 1460, "ESP_NOW": 250, "BLE": 512}


def measurements(protocol: str, chunk_bytes: int | None = None) -> list[Measurement]:
    out = []
    for (proto, chunk), cells in TRANSFER_TABLE.items():
        if proto != protocol or (chunk_bytes is not None and chunk != chunk_bytes):
            continue
        for layer, (latency, _) in cells.items():
            out.append(Measurement(BOUNDARY_BYTES[layer], chunk, latency, proto))
    return out


def stage_timings() -> StageTimings:
    return StageTimings()


@lru_cache(maxsize=None)
def calibrations() -> dict[str, Calibration]:
    out = {}
    for proto, chunk in CALIBRATION_CHUNK.items():
        out[proto] = calibrate(
            measurements(proto, chunk),
            stall_threshold=TCP_STALL_THRESHOLD if proto == "TCP" else None,
            setup_ms=SETUP_MS[proto],
            feedback_ms=FEEDBACK_MS[proto],
        )
    return out


def link_models() -> dict[str, LinkModel]:
    return {name: cal.model for name, cal in calibrations().items()}


def measurements_csv() -> str:
    lines = ["protocol,chunk_bytes,payload_bytes,latency_ms"]
    for (proto, chunk), cells in TRANSFER_TABLE.items():
        for layer, (latency, _) in cells.items():
            lines.append(f"{proto},{chunk},{BOUNDARY_BYTES[layer]},{latency}")
    return "\n".join(lines) + "\n"
