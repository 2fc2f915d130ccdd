import binascii
import os
import random
import struct
import threading

import numpy as np
import pytest

from splitwire.quant import QuantParams, QuantTensor
from splitwire.wire import (
    HEADER_SIZE,
    ActivationMessage,
    BadMagicError,
    CrcMismatchError,
    FaultInjector,
    FeedbackMessage,
    Frame,
    FrameError,
    IntegrityError,
    MessageError,
    MsgType,
    Reliability,
    TransferTimeout,
    TruncatedFrameError,
    chunk_message,
    decode_frame,
    encode_frame,
    open_pair,
    reassemble,
    receive_message,
    send_message,
)

KINDS = ("in_memory", "datagram", "stream")


def manual_frame(msg_type, tensor_id, seq, total, payload):
    """Oracle encoding built by hand from the documented layout."""
    prefix = b"SL" + bytes([1, msg_type]) + struct.pack("<IHHH", tensor_id, seq, total, len(payload))
    crc = binascii.crc32(prefix + payload) & 0xFFFFFFFF
    return prefix + crc.to_bytes(4, "little") + payload


def test_header_layout_matches_oracle():
    f = Frame(MsgType.ACTIVATION, 7, 3, 10, b"hello")
    raw = encode_frame(f)
    assert HEADER_SIZE == 18
    assert raw == manual_frame(1, 7, 3, 10, b"hello")
    assert decode_frame(raw) == f


def test_decode_errors():
    raw = encode_frame(Frame(MsgType.FEEDBACK, 1, 0, 1, b"abc"))
    with pytest.raises(TruncatedFrameError):
        decode_frame(raw[:10])
    with pytest.raises(TruncatedFrameError):
        decode_frame(raw[:-1])
    with pytest.raises(BadMagicError):
        decode_frame(b"XX" + raw[2:])
    flipped = bytearray(raw)
    flipped[-1] ^= 0x01
    with pytest.raises(CrcMismatchError):
        decode_frame(bytes(flipped))
    with pytest.raises(FrameError):
        decode_frame(raw + b"\x00")


def test_every_single_bit_flip_is_detected():
    raw = encode_frame(Frame(MsgType.ACTIVATION, 2, 1, 4, bytes(range(40))))
    for bit in range(len(raw) * 8):
        buf = bytearray(raw)
        buf[bit // 8] ^= 1 << (bit % 8)
        with pytest.raises(FrameError):
            decode_frame(bytes(buf))


def test_frame_field_validation():
    with pytest.raises(FrameError):
        Frame(MsgType.ACTIVATION, 0, 5, 5)
    with pytest.raises(FrameError):
        Frame(MsgType.ACTIVATION, -1, 0, 1)


@pytest.mark.parametrize("nbytes,chunk,frames", [(150528, 250, 603), (5488, 250, 22), (5488, 1460, 4), (0, 250, 1)])
def test_chunk_counts_and_reassembly(nbytes, chunk, frames):
    msg = os.urandom(nbytes)
    parts = chunk_message(msg, chunk, tensor_id=9)
    assert len(parts) == frames
    assert all(len(p.payload) <= chunk for p in parts)
    shuffled = parts + parts[:5]
    random.Random(1).shuffle(shuffled)
    r = reassemble(shuffled)
    assert r.complete and r.data == msg
    assert r.duplicates == min(5, len(parts))


def test_gap_report():
    parts = chunk_message(os.urandom(2500), 250)
    r = reassemble([p for p in parts if p.seq not in (2, 7)])
    assert not r.complete
    assert r.missing == {2, 7}


def test_conflicting_duplicate_raises():
    a = Frame(MsgType.ACTIVATION, 1, 0, 2, b"aa")
    b = Frame(MsgType.ACTIVATION, 1, 0, 2, b"bb")
    with pytest.raises(IntegrityError):
        reassemble([a, b])
    with pytest.raises(IntegrityError):
        reassemble([a, Frame(MsgType.ACTIVATION, 2, 1, 2, b"cc")])


def test_activation_message_round_trip():
    data = np.random.default_rng(0).integers(-128, 128, 5488).astype(np.int8)
    scale = float(np.float32(0.0235))  # the wire carries float32
    t = QuantTensor((7, 7, 112), QuantParams(scale, -5), data)
    msg = ActivationMessage(3, t)
    assert len(msg.encode()) == 5488 + 5 + 6 + 5
    back = ActivationMessage.decode(msg.encode())
    assert back.tensor_id == 3 and back.tensor == t
    with pytest.raises(MessageError):
        ActivationMessage.decode(msg.encode()[:-1])


def test_feedback_message_round_trip():
    fb = FeedbackMessage.from_scores(4, [(235, 0.5), (1, 0.25)])
    assert FeedbackMessage.decode(fb.encode()) == fb
    with pytest.raises(MessageError):
        FeedbackMessage(1, [(0, 1.5)])
    with pytest.raises(MessageError):
        FeedbackMessage.decode(fb.encode() + b"\x00")


def _transfer(kind, msg, chunk, reliability, faults=None, ack_timeout=0.02):
    a, b = open_pair(kind, faults_a=faults, timeout=5.0)
    out = {}

    def rx():
        try:
            out["rx"] = receive_message(b, reliability, timeout=5.0, idle_timeout=0.3, linger=0.1)
        except Exception as exc:
            out["err"] = exc

    t = threading.Thread(target=rx)
    t.start()
    try:
        tx = send_message(a, msg, chunk, reliability, tensor_id=11, ack_timeout=ack_timeout)
        t.join(10)
    finally:
        a.close()
        b.close()
    if "err" in out:
        raise out["err"]
    return tx, out["rx"]


@pytest.mark.parametrize("kind", KINDS)
def test_clean_transfer(kind):
    msg = os.urandom(5488)
    tx, rx = _transfer(kind, msg, 250, Reliability.NONE)
    assert rx.data == msg
    assert tx.frames_sent == 22 and rx.frames_received == 22


@pytest.mark.parametrize("kind", KINDS)
def test_reorder_and_duplicate(kind):
    msg = os.urandom(20000)
    faults = FaultInjector(duplicate=0.2, reorder=0.2, seed=5)
    tx, rx = _transfer(kind, msg, 250, Reliability.NONE, faults)
    assert rx.complete and rx.data == msg
    assert rx.reassembly.duplicates > 0


@pytest.mark.parametrize("kind", KINDS)
def test_stop_and_wait_survives_loss(kind):
    msg = os.urandom(10000)
    faults = FaultInjector(loss=0.1, duplicate=0.05, reorder=0.05, seed=2)
    tx, rx = _transfer(kind, msg, 250, Reliability.STOP_AND_WAIT, faults)
    assert rx.data == msg
    assert tx.retransmissions > 0
    assert tx.data_frames == 40


@pytest.mark.parametrize("kind", ("in_memory", "datagram"))
def test_best_effort_gap_report_is_exact(kind):
    msg = os.urandom(10000)
    faults = FaultInjector(loss=0.1, seed=4)
    tx, rx = _transfer(kind, msg, 250, Reliability.NONE, faults)
    dropped = {seq for mt, tid, seq in faults.dropped if mt == MsgType.ACTIVATION}
    assert dropped
    assert rx.missing == dropped
    assert not rx.complete and rx.data is None


def test_corrupt_frames_are_dropped_and_retransmitted():
    msg = os.urandom(5000)
    faults = FaultInjector(corrupt=0.2, seed=9)
    tx, rx = _transfer("in_memory", msg, 250, Reliability.STOP_AND_WAIT, faults)
    assert rx.data == msg and tx.retransmissions > 0


def test_receive_times_out_without_sender():
    a, b = open_pair("in_memory")
    with pytest.raises(TransferTimeout):
        receive_message(b, timeout=0.05)


def test_send_gives_up_without_acks():
    a, b = open_pair("in_memory")
    with pytest.raises(TransferTimeout):
        send_message(a, b"x" * 10, 5, Reliability.STOP_AND_WAIT, ack_timeout=0.005, max_retries=3)


def test_link_payload_cap():
    from splitwire.protocols import PROFILES

    a, b = open_pair("in_memory", profile=PROFILES["ESP_NOW"])
    with pytest.raises(ValueError):
        send_message(a, b"x" * 600, 300)
