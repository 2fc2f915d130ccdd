"""Toy int8 dense network, split execution and a two-node split session.

The network stands in for the quantized CNN: every layer is an int8 matrix
with an int32 bias, accumulated in int32 and requantized to the next layer's
parameters, so Part 1 output bytes can be fed to Part 2 unchanged.
"""

from __future__ import annotations

import base64
import csv
import io
import json
import logging
import math
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .protocols import ProtocolProfile, get_profile
from .quant import (
    QMAX,
    QMIN,
    QuantParams,
    QuantTensor,
    check_alignment,
    dequantize,
    quantize,
    requantize,
    round_half_away,
)
from .wire import (
    ActivationMessage,
    FaultInjector,
    FeedbackMessage,
    MsgType,
    Reliability,
    TransportError,
    open_pair,
    receive_message,
    send_message,
)

__all__ = [
    "DenseLayer",
    "Prediction",
    "SessionFailed",
    "SessionResult",
    "SessionTrace",
    "ToyModel",
    "demo_model",
    "infer_full",
    "infer_part",
    "random_toy_model",
    "run_split_session",
    "split_toy",
    "top_k",
]

log = logging.getLogger(__name__)

INT32_MIN, INT32_MAX = -(2**31), 2**31 - 1
ACTIVATIONS = ("none", "relu6")


@dataclass(frozen=True, eq=False)
class DenseLayer:
    weights: np.ndarray  # int8 [out, in]
    bias: np.ndarray  # int32 [out]
    weight_scale: float
    input_params: QuantParams
    output_params: QuantParams
    activation: str = "none"

    def __post_init__(self):
        w = np.asarray(self.weights)
        b = np.asarray(self.bias)
        if w.ndim != 2 or w.dtype != np.int8:
            raise ValueError("weights must be a 2-D int8 array")
        if b.shape != (w.shape[0],) or b.dtype != np.int32:
            raise ValueError("bias must be an int32 vector with one entry per output")
        if not self.weight_scale > 0:
            raise ValueError("weight_scale must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def multiplier(self) -> float:
        return self.input_params.scale * self.weight_scale / self.output_params.scale

    def clamp_bounds(self) -> tuple[int, int]:
        if self.activation == "relu6":
            return max(QMIN, self.output_params.zero_point), self.output_params.quantize_scalar(6.0)
        return QMIN, QMAX

    def forward(self, q: np.ndarray) -> np.ndarray:
        x = q.astype(np.int64) - self.input_params.zero_point
        acc = self.weights.astype(np.int64) @ x + self.bias.astype(np.int64)
        acc = np.clip(acc, INT32_MIN, INT32_MAX)
        out = round_half_away(acc.astype(np.float64) * self.multiplier) + self.output_params.zero_point
        lo, hi = self.clamp_bounds()
        return np.clip(out, lo, hi).astype(np.int8)

    def __eq__(self, other):
        if not isinstance(other, DenseLayer):
            return NotImplemented
        return (
            np.array_equal(self.weights, other.weights)
            and np.array_equal(self.bias, other.bias)
            and self.weight_scale == other.weight_scale
            and self.input_params == other.input_params
            and self.output_params == other.output_params
            and self.activation == other.activation
        )


@dataclass(frozen=True, eq=False)
class ToyModel:
    layers: tuple[DenseLayer, ...]
    labels: tuple[str, ...] = ()
    head: bool = True

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "labels", tuple(self.labels))
        if not layers:
            raise ValueError("model needs at least one layer")
        for i, (a, b) in enumerate(zip(layers, layers[1:])):
            if a.out_dim != b.in_dim:
                raise ValueError(f"layer {i} outputs {a.out_dim} values but layer {i + 1} takes {b.in_dim}")
            if a.output_params != b.input_params:
                raise ValueError(f"quant params between layer {i} and {i + 1} do not chain")
        if self.head and self.labels and len(self.labels) != layers[-1].out_dim:
            raise ValueError("label count must match the output dimension")

    @property
    def input_params(self) -> QuantParams:
        return self.layers[0].input_params

    @property
    def output_params(self) -> QuantParams:
        return self.layers[-1].output_params

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    def __eq__(self, other):
        if not isinstance(other, ToyModel):
            return NotImplemented
        return self.layers == other.layers and self.labels == other.labels and self.head == other.head

    # serialization ---------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format": "splitwire-toy/1",
            "head": self.head,
            "labels": list(self.labels),
            "layers": [
                {
                    "in_dim": layer.in_dim,
                    "out_dim": layer.out_dim,
                    "weights": base64.b64encode(layer.weights.tobytes()).decode("ascii"),
                    "bias": base64.b64encode(layer.bias.astype("<i4").tobytes()).decode("ascii"),
                    "weight_scale": layer.weight_scale,
                    "input": {"scale": layer.input_params.scale, "zero_point": layer.input_params.zero_point},
                    "output": {"scale": layer.output_params.scale, "zero_point": layer.output_params.zero_point},
                    "activation": layer.activation,
                }
                for layer in self.layers
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, doc: dict) -> "ToyModel":
        if doc.get("format") != "splitwire-toy/1":
            raise ValueError(f"unsupported toy model format {doc.get('format')!r}")
        layers = []
        for e in doc["layers"]:
            w = np.frombuffer(base64.b64decode(e["weights"]), dtype=np.int8)
            b = np.frombuffer(base64.b64decode(e["bias"]), dtype="<i4").astype(np.int32)
            layers.append(DenseLayer(
                weights=w.reshape(e["out_dim"], e["in_dim"]).copy(),
                bias=b.copy(),
                weight_scale=float(e["weight_scale"]),
                input_params=QuantParams(**e["input"]),
                output_params=QuantParams(**e["output"]),
                activation=e.get("activation", "none"),
            ))
        return cls(tuple(layers), tuple(doc.get("labels", ())), bool(doc.get("head", True)))

    @classmethod
    def from_json(cls, text: str) -> "ToyModel":
        return cls.from_dict(json.loads(text))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "ToyModel":
        return cls.from_json(Path(path).read_text())


def _softmax(values: Sequence[float]) -> np.ndarray:
    m = max(values)
    exps = [math.exp(v - m) for v in values]
    total = math.fsum(exps)
    return np.array([e / total for e in exps])


def _run_layers(model: ToyModel, x: QuantTensor) -> QuantTensor:
    if x.shape != (model.input_dim,):
        raise ValueError(f"input shape {x.shape} does not match model input ({model.input_dim},)")
    if not check_alignment(x.params, model.input_params):
        x = requantize(x, model.input_params)
    q = x.data
    for layer in model.layers:
        q = layer.forward(q)
    return QuantTensor((model.output_dim,), model.output_params, q)


def scores_from_logits(t: QuantTensor) -> np.ndarray:
    """Dequantize output logits and normalize to probabilities (softmax)."""
    return _softmax([float(v) for v in dequantize(t).reshape(-1)])


def infer_part(part: ToyModel, x: QuantTensor):
    """Run one part: a boundary QuantTensor for Part 1, class scores for the head."""
    out = _run_layers(part, x)
    return scores_from_logits(out) if part.head else out


def infer_full(model: ToyModel, x: QuantTensor) -> np.ndarray:
    return scores_from_logits(_run_layers(model, x))


def split_toy(model: ToyModel, index: int) -> tuple[ToyModel, ToyModel]:
    """Part 1 = layers[:index], Part 2 = layers[index:]."""
    if not 0 < index < len(model.layers):
        raise IndexError(f"split index must be in 1..{len(model.layers) - 1}, got {index}")
    part1 = ToyModel(model.layers[:index], (), head=False)
    part2 = ToyModel(model.layers[index:], model.labels, head=model.head)
    return part1, part2


@dataclass(frozen=True)
class Prediction:
    class_id: int
    label: str
    confidence: float


def top_k(scores, k: int, labels: Sequence[str] | None = None) -> list[Prediction]:
    """Highest-confidence classes; ties go to the lower class id."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if s.size == 0:
        raise ValueError("empty score vector")
    if k < 1:
        raise ValueError("k must be >= 1")
    order = sorted(range(s.size), key=lambda i: (-s[i], i))[:k]
    return [
        Prediction(i, labels[i] if labels and i < len(labels) else str(i), float(s[i]))
        for i in order
    ]


# --- model generation ----------------------------------------------------------

def _weight_scale(in_params: QuantParams, out_params: QuantParams, in_dim: int) -> float:
    # map a typical accumulator (about +-3 sigma) onto the int8 output range
    acc_std = math.sqrt(in_dim) * 74.0 * 40.0
    return out_params.scale * 255.0 / (in_params.scale * acc_std * 6.0)


def random_toy_model(
    rng: np.random.Generator,
    dims: Sequence[int],
    labels: Sequence[str] | None = None,
    relu6: float = 0.5,
) -> ToyModel:
    """Random int8 model with layer widths ``dims`` (input first)."""
    if len(dims) < 2:
        raise ValueError("dims needs an input and at least one output width")
    params = QuantParams(float(rng.uniform(0.01, 0.1)), int(rng.integers(-20, 21)))
    layers = []
    for i, (d_in, d_out) in enumerate(zip(dims, dims[1:])):
        # real activations stay within roughly +-6 so relu6 actually clips
        out_params = QuantParams(float(rng.uniform(0.02, 0.06)), int(rng.integers(-20, 21)))
        w_scale = _weight_scale(params, out_params, d_in)
        last = i == len(dims) - 2
        layers.append(DenseLayer(
            weights=rng.integers(-127, 128, size=(d_out, d_in), dtype=np.int8),
            bias=rng.integers(-5000, 5001, size=d_out).astype(np.int32),
            weight_scale=w_scale,
            input_params=params,
            output_params=out_params,
            activation="relu6" if (not last and rng.random() < relu6) else "none",
        ))
        params = out_params
    return ToyModel(tuple(layers), tuple(labels) if labels else tuple(f"class_{i}" for i in range(dims[-1])))


DOG_LABELS = (
    "German shepherd", "Leonberg", "malinois", "chow", "Irish terrier",
    "beagle", "golden retriever", "Siberian husky", "pug", "basenji",
)

# 7*7*112: the int8 boundary tensor after block_16_project_BN
DEMO_DIMS = (64, 5488, 32, len(DOG_LABELS))
DEMO_SPLIT_INDEX = 1


def demo_model(seed: int = 42) -> ToyModel:
    return random_toy_model(np.random.default_rng(seed), DEMO_DIMS, DOG_LABELS, relu6=1.0)


def random_input(model: ToyModel, rng: np.random.Generator) -> QuantTensor:
    lo, hi = model.input_params.representable_range
    return quantize(rng.uniform(lo, hi, size=model.input_dim), model.input_params)


# --- split session -------------------------------------------------------------

@dataclass(frozen=True)
class StageEvent:
    stage: str
    device: int
    start: float
    end: float
    frames: int | None = None

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass
class SessionTrace:
    """Per-stage timestamps (perf_counter seconds) for one inference round trip."""

    events: list[StageEvent] = field(default_factory=list)
    failed: str | None = None
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def record(self, stage: str, device: int, start: float, end: float, frames: int | None = None):
        with self._lock:
            self.events.append(StageEvent(stage, device, start, end, frames))

    def ordered(self) -> list[StageEvent]:
        return sorted(self.events, key=lambda e: (e.start, e.end))

    @property
    def origin(self) -> float:
        return min(e.start for e in self.events) if self.events else 0.0

    @property
    def rtt(self) -> float:
        if not self.events:
            return 0.0
        return max(e.end for e in self.events) - self.origin

    def stage(self, name: str) -> StageEvent:
        for e in self.events:
            if e.stage == name:
                return e
        raise KeyError(name)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["stage", "device", "start_ms", "end_ms", "duration_ms", "frames"])
        t0 = self.origin
        for e in self.ordered():
            w.writerow([
                e.stage, e.device, f"{(e.start - t0) * 1e3:.4f}", f"{(e.end - t0) * 1e3:.4f}",
                f"{e.duration * 1e3:.4f}", "" if e.frames is None else e.frames,
            ])
        if self.events:
            w.writerow(["RTT", 1, "0.0000", f"{self.rtt * 1e3:.4f}", f"{self.rtt * 1e3:.4f}", ""])
        if self.failed:
            w.writerow(["FAILED", "", "", "", "", self.failed])
        return buf.getvalue()

    def as_dict(self) -> dict:
        t0 = self.origin
        return {
            "stages": [
                {
                    "stage": e.stage, "device": e.device,
                    "start_ms": (e.start - t0) * 1e3, "end_ms": (e.end - t0) * 1e3,
                    "duration_ms": e.duration * 1e3, "frames": e.frames,
                }
                for e in self.ordered()
            ],
            "rtt_ms": self.rtt * 1e3,
            "failed": self.failed,
        }


class SessionFailed(TransportError):
    def __init__(self, msg: str, trace: SessionTrace):
        super().__init__(msg)
        self.trace = trace


@dataclass(frozen=True)
class SessionResult:
    predictions: list[Prediction]
    trace: SessionTrace
    boundary_bytes: int
    activation_frames: int
    retransmissions: int
    aligned: bool


DESCRIPTOR_ID = 0


@dataclass(frozen=True)
class LinkSettings:
    chunk_bytes: int
    reliability: Reliability = Reliability.STOP_AND_WAIT
    ack_timeout: float = 0.05
    timeout: float = 10.0

    @property
    def linger(self) -> float:
        return 3 * self.ack_timeout if self.reliability is Reliability.STOP_AND_WAIT else 0.0


def send_descriptor(ep, part1: ToyModel, link: LinkSettings):
    """Announce the boundary tensor's shape and quant params (done once, at setup)."""
    shape = (part1.output_dim,)
    header = ActivationMessage(
        DESCRIPTOR_ID, QuantTensor(shape, part1.output_params, np.zeros(shape, np.int8))
    ).encode_header()
    return send_message(ep, header, link.chunk_bytes, link.reliability, tensor_id=DESCRIPTOR_ID,
                        msg_type=MsgType.ACTIVATION, ack_timeout=link.ack_timeout)


def receive_descriptor(ep, link: LinkSettings) -> tuple[tuple[int, ...], QuantParams]:
    rx = receive_message(ep, link.reliability, msg_type=MsgType.ACTIVATION, timeout=link.timeout)
    if not rx.complete:
        raise TransportError("boundary descriptor incomplete")
    _, shape, params, _ = ActivationMessage.decode_header(rx.data)
    return shape, params


def node1_round(ep, part1_json: str, x_real: np.ndarray, link: LinkSettings, trace: SessionTrace,
                tensor_id: int = 1, peer_reassembled=None):
    """Device 1: load Part 1, infer, ship the boundary bytes, wait for feedback.

    ``peer_reassembled`` (in-process runs only) blocks until device 2 holds
    the whole tensor and returns that timestamp, which then closes the
    transmission stage.
    """
    t = time.perf_counter()
    part1 = ToyModel.from_json(part1_json)
    trace.record("Model loading", 1, t, time.perf_counter())

    t = time.perf_counter()
    x = quantize(x_real, part1.input_params)
    trace.record("Input loading", 1, t, time.perf_counter())

    t = time.perf_counter()
    out_buf = np.empty(part1.output_dim, dtype=np.int8)
    trace.record("Tensors allocation", 1, t, time.perf_counter())

    t = time.perf_counter()
    boundary = infer_part(part1, x)
    trace.record("Inference", 1, t, time.perf_counter())

    t = time.perf_counter()
    out_buf[:] = boundary.data
    payload = out_buf.tobytes()
    trace.record("Intermediate activations buffering", 1, t, time.perf_counter())

    sent = send_message(ep, payload, link.chunk_bytes, link.reliability, tensor_id=tensor_id,
                        msg_type=MsgType.ACTIVATION, ack_timeout=link.ack_timeout)
    end = sent.send_completed
    if peer_reassembled is not None:
        end = peer_reassembled() or end
    trace.record("Transmission", 1, sent.started, end, sent.data_frames)

    fb = receive_message(ep, link.reliability, msg_type=MsgType.FEEDBACK, timeout=link.timeout,
                         linger=link.linger)
    if not fb.complete:
        raise TransportError(f"feedback incomplete, missing frames {sorted(fb.missing)}")
    return FeedbackMessage.decode(fb.data), sent, fb.reassembled


def node2_round(ep, part2_json: str, shape, params: QuantParams, k: int, link: LinkSettings,
                trace: SessionTrace, on_reassembled=None) -> float:
    """Device 2: rebuild the boundary tensor, run Part 2, answer with top-k.

    Returns the time the feedback stage started.
    """
    rx = receive_message(ep, link.reliability, msg_type=MsgType.ACTIVATION, timeout=link.timeout)
    if on_reassembled is not None:
        on_reassembled(rx.reassembled)
    if not rx.complete:
        raise TransportError(f"activation incomplete, missing frames {sorted(rx.missing)}")

    t = time.perf_counter()
    part2 = ToyModel.from_json(part2_json)
    trace.record("Model loading", 2, t, time.perf_counter())

    t = time.perf_counter()
    x = QuantTensor.frombytes(rx.data, shape, params)
    if not check_alignment(params, part2.input_params):
        log.warning("boundary params not aligned with Part 2 input; requantizing")
        x = requantize(x, part2.input_params)
    trace.record("Tensors allocation", 2, t, time.perf_counter())

    t = time.perf_counter()
    preds = top_k(infer_part(part2, x), k, part2.labels)
    trace.record("Inference", 2, t, time.perf_counter())

    fb_start = time.perf_counter()
    msg = FeedbackMessage.from_scores(rx.reassembly.tensor_id, [(p.class_id, p.confidence) for p in preds])
    send_message(ep, msg.encode(), link.chunk_bytes, link.reliability, tensor_id=rx.reassembly.tensor_id,
                 msg_type=MsgType.FEEDBACK, ack_timeout=link.ack_timeout)
    return fb_start


def predictions_from_feedback(fb: FeedbackMessage, labels: Sequence[str]) -> list[Prediction]:
    return [
        Prediction(c, labels[c] if c < len(labels) else str(c), p) for c, p in fb.predictions
    ]


def _endpoint_kind(kind: str) -> str:
    return {"udp": "datagram", "tcp": "stream", "inmem": "in_memory"}.get(kind, kind)


def run_split_session(
    model: ToyModel,
    split_index: int,
    kind: str = "in_memory",
    chunk_bytes: int | None = None,
    k: int = 5,
    *,
    profile: ProtocolProfile | str | None = None,
    reliability: Reliability | str = Reliability.STOP_AND_WAIT,
    x_real: np.ndarray | None = None,
    seed: int = 0,
    faults: tuple[FaultInjector | None, FaultInjector | None] = (None, None),
    ack_timeout: float = 0.05,
    timeout: float = 10.0,
) -> SessionResult:
    """Run device 1 and device 2 concurrently over a fresh endpoint pair.

    ``kind`` is datagram/udp, stream/tcp or in_memory/inmem; in-memory links
    take their payload limit from ``profile`` (ESP-NOW by default).
    """
    kind = _endpoint_kind(kind)
    if isinstance(profile, str):
        profile = get_profile(profile)
    if profile is None:
        profile = get_profile({"datagram": "UDP", "stream": "TCP"}.get(kind, "ESP_NOW"))
    chunk = profile.default_chunk_bytes if chunk_bytes is None else chunk_bytes
    profile.check_chunk(chunk)
    link = LinkSettings(chunk, Reliability(reliability), ack_timeout, timeout)

    part1, part2 = split_toy(model, split_index)
    part1_json, part2_json = part1.to_json(), part2.to_json()
    if x_real is None:
        lo, hi = model.input_params.representable_range
        x_real = np.random.default_rng(seed).uniform(lo, hi, size=model.input_dim)

    trace = SessionTrace()
    t0 = time.perf_counter()
    try:
        ep1, ep2 = open_pair(kind, profile=profile if kind == "in_memory" else None,
                             faults_a=faults[0], faults_b=faults[1], timeout=timeout)
    except TransportError as exc:
        trace.failed = f"protocol setup: {exc}"
        raise SessionFailed(str(exc), trace) from exc

    reassembled = threading.Event()
    shared: dict = {}

    def device2():
        try:
            shape, params = receive_descriptor(ep2, link)
            shared["aligned"] = bool(check_alignment(params, part2.input_params))

            def mark(ts):
                shared["reassembled"] = ts
                reassembled.set()

            shared["fb_start"] = node2_round(ep2, part2_json, shape, params, k, link, trace, mark)
        except Exception as exc:  # reported by the main thread
            shared["error"] = exc
            reassembled.set()

    def peer_reassembled():
        reassembled.wait(timeout)
        return shared.get("reassembled")

    worker = threading.Thread(target=device2, name="device-2", daemon=True)
    worker.start()
    try:
        try:
            send_descriptor(ep1, part1, link)
            trace.record("Protocol setup", 1, t0, time.perf_counter())
            fb, sent, fb_done = node1_round(ep1, part1_json, x_real, link, trace,
                                            peer_reassembled=peer_reassembled)
        except TransportError as exc:
            worker.join(timeout)
            cause = shared.get("error", exc)
            trace.failed = str(cause)
            raise SessionFailed(str(cause), trace) from exc
        worker.join(timeout)
        if "error" in shared:
            trace.failed = str(shared["error"])
            raise SessionFailed(str(shared["error"]), trace) from shared["error"]
        trace.record("Feedback delay", 2, shared["fb_start"], fb_done)
    finally:
        ep1.close()
        ep2.close()

    boundary_bytes = part1.output_dim
    return SessionResult(
        predictions=predictions_from_feedback(fb, model.labels),
        trace=trace,
        boundary_bytes=boundary_bytes,
        activation_frames=sent.data_frames,
        retransmissions=sent.retransmissions,
        aligned=shared.get("aligned", False),
    )


def monolithic_predictions(model: ToyModel, x_real: np.ndarray, k: int) -> list[Prediction]:
    """Reference answer with float32 confidences, as they arrive over the wire."""
    scores = infer_full(model, quantize(x_real, model.input_params))
    return [replace(p, confidence=float(np.float32(p.confidence))) for p in top_k(scores, k, model.labels)]
