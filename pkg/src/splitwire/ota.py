"""Firmware image packaging and the device-side OTA update state machine.

Image container (little-endian)::

    b"SLOTAIMG" | major H | minor H | patch H | sha256 32s | blob_len I | blob
"""

from __future__ import annotations

import enum
import hashlib
import json
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable

from .wire import (
    Endpoint,
    MsgType,
    Reliability,
    TransportError,
    open_pair,
    receive_message,
    send_message,
    serve_until,
)

__all__ = [
    "AuditRecord",
    "Device",
    "FirmwareImage",
    "IllegalTransition",
    "ImageFormatError",
    "OTAServer",
    "ServerUnreachable",
    "State",
    "Version",
    "apply_update",
    "check_for_update",
    "flip_bit",
    "package",
    "parse_container",
    "poll_once",
    "replay",
]

CONTAINER_MAGIC = b"SLOTAIMG"
_CONTAINER_HEAD = struct.Struct("<8s3H32sI")
OTA_CHUNK = 1460


class ImageFormatError(ValueError):
    pass


class ServerUnreachable(ConnectionError):
    pass


class IllegalTransition(RuntimeError):
    pass


@dataclass(frozen=True, order=True)
class Version:
    major: int
    minor: int = 0
    patch: int = 0

    def __post_init__(self):
        for part in (self.major, self.minor, self.patch):
            if not 0 <= part <= 0xFFFF:
                raise ValueError(f"version components must fit 16 bits: {self}")

    @classmethod
    def parse(cls, text: "str | Version") -> "Version":
        if isinstance(text, Version):
            return text
        parts = text.strip().split(".")
        if not 1 <= len(parts) <= 3:
            raise ValueError(f"bad version {text!r}")
        try:
            nums = [int(p) for p in parts]
        except ValueError:
            raise ValueError(f"bad version {text!r}") from None
        return cls(*nums)

    def __str__(self):
        return f"{self.major}.{self.minor}.{self.patch}"


@dataclass(frozen=True)
class FirmwareImage:
    version: Version
    blob: bytes
    digest: bytes
    target_node: str = ""
    part_id: str = ""

    def verify(self) -> bool:
        return hashlib.sha256(self.blob).digest() == self.digest

    def to_bytes(self) -> bytes:
        v = self.version
        return _CONTAINER_HEAD.pack(
            CONTAINER_MAGIC, v.major, v.minor, v.patch, self.digest, len(self.blob)
        ) + self.blob

    def descriptor(self) -> dict:
        return {
            "version": str(self.version),
            "sha256": self.digest.hex(),
            "size": len(self.blob),
            "target_node": self.target_node,
            "part_id": self.part_id,
        }


def package(blob: bytes, version: str | Version, target_node: str = "", part_id: str = "") -> FirmwareImage:
    blob = bytes(blob)
    if not blob:
        raise ValueError("cannot package an empty blob")
    return FirmwareImage(Version.parse(version), blob, hashlib.sha256(blob).digest(), target_node, part_id)


def parse_container(buf: bytes) -> FirmwareImage:
    """Decode a container; the embedded digest is NOT checked here."""
    if len(buf) < _CONTAINER_HEAD.size:
        raise ImageFormatError("container shorter than its header")
    magic, major, minor, patch, digest, n = _CONTAINER_HEAD.unpack_from(buf)
    if magic != CONTAINER_MAGIC:
        raise ImageFormatError(f"bad container magic {magic!r}")
    blob = bytes(buf[_CONTAINER_HEAD.size:])
    if len(blob) != n:
        raise ImageFormatError(f"blob length {len(blob)} != declared {n}")
    return FirmwareImage(Version(major, minor, patch), blob, digest)


class OTAServer:
    """Read-only image catalog, optionally marked unreachable."""

    def __init__(self, images: Iterable[FirmwareImage] = (), reachable: bool = True):
        self._images = tuple(images)
        self.reachable = reachable

    def list_images(self) -> tuple[FirmwareImage, ...]:
        if not self.reachable:
            raise ServerUnreachable("OTA server unreachable")
        return self._images


def check_for_update(current: str | Version, catalog: OTAServer | Iterable[FirmwareImage]) -> FirmwareImage | None:
    """Newest image strictly newer than ``current``, if any."""
    current = Version.parse(current)
    images = catalog.list_images() if isinstance(catalog, OTAServer) else tuple(catalog)
    newer = [img for img in images if img.version > current]
    return max(newer, key=lambda img: img.version) if newer else None


# --- device state machine --------------------------------------------------------

class State(str, enum.Enum):
    IDLE = "Idle"
    CHECKING = "Checking"
    DOWNLOADING = "Downloading"
    VERIFYING = "Verifying"
    FLASHING = "Flashing"
    REBOOTING = "Rebooting"
    POST_VALIDATING = "PostValidating"
    ACTIVE = "Active"
    ROLLED_BACK = "RolledBack"


TRANSITIONS: dict[State, frozenset[State]] = {
    State.IDLE: frozenset({State.CHECKING}),
    State.ACTIVE: frozenset({State.CHECKING}),
    State.CHECKING: frozenset({State.DOWNLOADING, State.IDLE}),
    State.DOWNLOADING: frozenset({State.VERIFYING, State.IDLE}),
    State.VERIFYING: frozenset({State.FLASHING, State.ROLLED_BACK}),
    State.FLASHING: frozenset({State.REBOOTING}),
    State.REBOOTING: frozenset({State.POST_VALIDATING}),
    State.POST_VALIDATING: frozenset({State.ACTIVE, State.ROLLED_BACK}),
    State.ROLLED_BACK: frozenset({State.IDLE}),
}


@dataclass(frozen=True)
class AuditRecord:
    seq: int
    src: State
    dst: State
    active_version: str
    verified_digest: str | None = None
    note: str = ""

    def to_json(self) -> str:
        return json.dumps({
            "seq": self.seq,
            "from": self.src.value,
            "to": self.dst.value,
            "active_version": self.active_version,
            "verified_digest": self.verified_digest,
            "note": self.note,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "AuditRecord":
        d = json.loads(line)
        return cls(d["seq"], State(d["from"]), State(d["to"]), d["active_version"],
                   d.get("verified_digest"), d.get("note", ""))


@dataclass
class Device:
    """One simulated node: boot slot, staging slot and an append-only audit log."""

    node_id: str = "node-1"
    active_version: Version = field(default_factory=lambda: Version(1, 0, 0))
    active_digest: bytes | None = None
    state: State = State.IDLE
    staged_image: FirmwareImage | None = None
    audit: list[AuditRecord] = field(default_factory=list)
    _verified: bytes | None = field(default=None, repr=False)
    _previous: tuple[Version, bytes | None] | None = field(default=None, repr=False)

    def _go(self, dst: State, note: str = "") -> None:
        if dst not in TRANSITIONS[self.state]:
            raise IllegalTransition(f"{self.state.value} -> {dst.value}")
        if dst is State.ACTIVE and (
            self._verified is None or self.active_digest != self._verified
        ):
            raise IllegalTransition("refusing to activate an image whose digest was not verified")
        rec = AuditRecord(
            len(self.audit), self.state, dst, str(self.active_version),
            self._verified.hex() if self._verified else None, note,
        )
        self.audit.append(rec)
        self.state = dst

    def recover(self) -> None:
        """Acknowledge a rollback so the device may try again."""
        self._go(State.IDLE, "rollback acknowledged")

    def audit_lines(self) -> list[str]:
        return [r.to_json() for r in self.audit]


def replay(records: Iterable[AuditRecord | str], initial_version: str | Version = "1.0.0") -> tuple[State, Version]:
    """Rebuild (state, active version) from an audit log, checking each transition."""
    state, version = State.IDLE, Version.parse(initial_version)
    for i, rec in enumerate(records):
        if isinstance(rec, str):
            rec = AuditRecord.from_json(rec)
        if rec.seq != i or rec.src is not state:
            raise IllegalTransition(f"audit record {i} does not follow state {state.value}")
        if rec.dst not in TRANSITIONS[state]:
            raise IllegalTransition(f"audit record {i}: {state.value} -> {rec.dst.value}")
        state = rec.dst
        version = Version.parse(rec.active_version)
    return state, version


def _serve(ep: Endpoint, payload: bytes, ack_timeout: float, out: dict) -> None:
    try:
        send_message(ep, payload, OTA_CHUNK, Reliability.STOP_AND_WAIT, tensor_id=1,
                     msg_type=MsgType.OTA_DATA, ack_timeout=ack_timeout)
    except Exception as exc:
        out["error"] = exc


def apply_update(
    device: Device,
    image: FirmwareImage,
    transport: tuple[Endpoint, Endpoint] | None = None,
    *,
    post_validate: Callable[[Device, FirmwareImage], bool] | None = None,
    corrupt: Callable[[bytes], bytes] | None = None,
    ack_timeout: float = 0.05,
    timeout: float = 5.0,
) -> Device:
    """Drive ``device`` through check, download, verify, flash, reboot, post-validate.

    ``image`` is the trusted catalog descriptor; its digest is what the
    downloaded blob must hash to. ``transport`` is a (server, device)
    endpoint pair; an in-memory pair is used when omitted. ``corrupt``
    rewrites the container bytes above the link layer, so link CRCs pass but
    the digest check does not.
    """
    if device.state not in (State.IDLE, State.ACTIVE):
        raise IllegalTransition(f"update must start from Idle or Active, not {device.state.value}")

    device._go(State.CHECKING, f"offered {image.version}")
    if image.version <= device.active_version:
        device._go(State.IDLE, f"{image.version} is not newer than {device.active_version}")
        return device

    own = transport is None
    server_ep, device_ep = open_pair("in_memory") if own else transport
    payload = image.to_bytes()
    if corrupt is not None:
        payload = corrupt(payload)

    device._go(State.DOWNLOADING, f"{len(payload)} bytes")
    out: dict = {}
    server = threading.Thread(target=_serve, args=(server_ep, payload, ack_timeout, out), daemon=True)
    server.start()
    try:
        rx = receive_message(device_ep, Reliability.STOP_AND_WAIT, msg_type=MsgType.OTA_DATA,
                             timeout=timeout)
        # re-ACK a lost final acknowledgement until the sender is satisfied
        deadline = time.monotonic() + timeout
        serve_until(device_ep, lambda: not server.is_alive() or time.monotonic() > deadline)
        server.join(timeout)
        if "error" in out:
            raise out["error"]
        received = parse_container(rx.data)
    except (TransportError, ImageFormatError) as exc:
        device._go(State.IDLE, f"download failed: {exc}")
        raise
    finally:
        if own:
            server_ep.close()
            device_ep.close()

    device._go(State.VERIFYING)
    digest = hashlib.sha256(received.blob).digest()
    if digest != image.digest or received.digest != image.digest or received.version != image.version:
        device.staged_image = None
        device._go(State.ROLLED_BACK, "digest mismatch")
        return device
    device._verified = digest
    device.staged_image = received

    device._go(State.FLASHING, str(received.version))
    device._previous = (device.active_version, device.active_digest)
    device.active_version, device.active_digest = received.version, digest
    device._go(State.REBOOTING)
    device._go(State.POST_VALIDATING)

    ok = post_validate(device, received) if post_validate else True
    if not ok:
        device.active_version, device.active_digest = device._previous
        device._verified = None
        device.staged_image = None
        device._go(State.ROLLED_BACK, "post-validation failed")
        return device
    device.staged_image = None
    device._go(State.ACTIVE, f"running {received.version}")
    return device


def poll_once(device: Device, server: OTAServer, **kw) -> Device:
    """One periodic check: fetch the newest image (if any) and apply it."""
    image = check_for_update(device.active_version, server)
    if image is None:
        device._go(State.CHECKING, "poll")
        device._go(State.IDLE, "no update")
        return device
    return apply_update(device, image, **kw)


def flip_bit(bit: int) -> Callable[[bytes], bytes]:
    """Corruption hook flipping one bit of the container's blob region."""
    def _corrupt(buf: bytes) -> bytes:
        out = bytearray(buf)
        pos = _CONTAINER_HEAD.size * 8 + bit % ((len(buf) - _CONTAINER_HEAD.size) * 8)
        out[pos // 8] ^= 1 << (pos % 8)
        return bytes(out)
    return _corrupt
