"""Link protocol profiles and chunk arithmetic shared by the planner, the
simulator and the transports."""

from __future__ import annotations

import enum
from dataclasses import dataclass

__all__ = [
    "ChunkSizeError",
    "ConnectionType",
    "ProtocolProfile",
    "PROFILES",
    "get_profile",
    "packet_count",
]

# 16-bit payload_len field in the frame header.
MAX_FRAME_PAYLOAD = 0xFFFF


class ChunkSizeError(ValueError):
    """A chunk size is not usable with the selected protocol."""


class ConnectionType(str, enum.Enum):
    PEER_TO_PEER = "peer_to_peer"
    CONNECTIONLESS = "connectionless"
    CONNECTION_ORIENTED_STREAM = "connection_oriented_stream"
    CONNECTION_ORIENTED_GATT = "connection_oriented_gatt"


@dataclass(frozen=True)
class ProtocolProfile:
    name: str
    max_payload_bytes: int
    connection_type: ConnectionType
    max_peers: str
    default_chunk_bytes: int

    def __post_init__(self):
        if self.max_payload_bytes <= 0:
            raise ValueError("max_payload_bytes must be positive")

    @property
    def is_stream(self) -> bool:
        return self.connection_type is ConnectionType.CONNECTION_ORIENTED_STREAM

    @property
    def chunk_limit(self) -> int:
        """Largest application chunk accepted for this profile.

        Stream transports segment writes themselves, so their max payload
        (the MSS) is advisory and the limit is the frame header's 16-bit
        length field instead.
        """
        if self.is_stream:
            return MAX_FRAME_PAYLOAD
        return self.max_payload_bytes

    def check_chunk(self, chunk_bytes: int) -> None:
        if chunk_bytes < 1:
            raise ChunkSizeError(f"chunk size must be >= 1, got {chunk_bytes}")
        if chunk_bytes > self.chunk_limit:
            raise ChunkSizeError(
                f"{self.name}: chunk {chunk_bytes} B exceeds max payload "
                f"{self.max_payload_bytes} B"
            )


PROFILES: dict[str, ProtocolProfile] = {
    p.name: p
    for p in (
        ProtocolProfile("ESP_NOW", 250, ConnectionType.PEER_TO_PEER, "up to 20 peers", 250),
        ProtocolProfile("UDP", 1472, ConnectionType.CONNECTIONLESS, "unlimited via IP mesh", 1460),
        ProtocolProfile(
            "TCP", 1460, ConnectionType.CONNECTION_ORIENTED_STREAM,
            "4-10 clients (ESP32 limit)", 1460,
        ),
        ProtocolProfile(
            "BLE", 512, ConnectionType.CONNECTION_ORIENTED_GATT,
            "1:7 classic, hundreds via mesh", 512,
        ),
    )
}

_ALIASES = {
    "ESPNOW": "ESP_NOW",
    "ESP-NOW": "ESP_NOW",
    "ESP_NOW": "ESP_NOW",
    "UDP": "UDP",
    "TCP": "TCP",
    "BLE": "BLE",
}


def get_profile(name: str) -> ProtocolProfile:
    """Look up a profile by name; accepts ``esp-now``, ``espnow``, ``ESP_NOW``..."""
    key = _ALIASES.get(name.strip().upper())
    if key is None:
        raise KeyError(f"unknown protocol {name!r}; expected one of {sorted(PROFILES)}")
    return PROFILES[key]


def packet_count(boundary_bytes: int, chunk_bytes: int) -> int:
    """Number of fixed-size chunks needed to carry ``boundary_bytes``."""
    if chunk_bytes < 1:
        raise ChunkSizeError(f"chunk size must be >= 1, got {chunk_bytes}")
    if boundary_bytes < 0:
        raise ValueError("byte count must be nonnegative")
    return -(-boundary_bytes // chunk_bytes)
