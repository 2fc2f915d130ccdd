import math
import random

import numpy as np
import pytest

from splitwire import testbed
from splitwire.catalog import builtin_mobilenetv2_catalog
from splitwire.linksim import (
    RTT_STAGES,
    DegenerateFitError,
    LinkModel,
    Measurement,
    StageTimings,
    Stall,
    calibrate,
    compare_protocols,
    estimate_rtt,
    load_link_models,
    read_measurements_csv,
    save_link_models,
    simulate_transfer,
)
from splitwire.planner import split
from splitwire.protocols import PROFILES, ChunkSizeError


def weighted_lstsq(rows, with_bytes):
    """Oracle: relative-residual least squares via numpy's SVD solver."""
    y = np.array([m.latency_ms for m in rows])
    cols = [[math.ceil(m.payload_bytes / m.chunk_bytes) for m in rows]]
    if with_bytes:
        cols.append([m.payload_bytes for m in rows])
    A = np.array(cols, dtype=float).T / y[:, None]
    coef, *_ = np.linalg.lstsq(A, np.ones_like(y), rcond=None)
    return coef


@pytest.fixture(scope="module")
def graph():
    return builtin_mobilenetv2_catalog()


def test_transfer_is_linear_in_packets():
    m = LinkModel(per_packet_ms=2.0, per_byte_ms=0.001)
    assert simulate_transfer(5488, 250, m) == pytest.approx(22 * 2.0 + 5.488)
    assert simulate_transfer(0, 250, m) == 0.0


def test_transfer_checks_chunk_against_profile():
    with pytest.raises(ChunkSizeError):
        simulate_transfer(1000, 300, LinkModel(1.0), PROFILES["ESP_NOW"])


def test_stall_applies_above_threshold():
    m = LinkModel(1.0, stall=Stall(100, 2.0))
    assert simulate_transfer(100 * 250, 250, m) == 100.0
    assert simulate_transfer(101 * 250, 250, m) == 202.0


def test_jitter_is_seeded():
    m = LinkModel(1.0)
    a = simulate_transfer(5000, 250, m, jitter=0.1, rng=random.Random(3))
    b = simulate_transfer(5000, 250, m, jitter=0.1, rng=random.Random(3))
    assert a == b != 20.0


def test_recovers_synthetic_coefficients():
    truth = LinkModel(per_packet_ms=0.7, per_byte_ms=0.0004)
    rows = [
        Measurement(b, c, simulate_transfer(b, c, truth))
        for b in (2744, 5488, 150528, 40000) for c in (250, 512, 1460)
    ]
    cal = calibrate(rows)
    assert cal.fitted_per_byte
    assert cal.model.per_packet_ms == pytest.approx(0.7, rel=1e-6)
    assert cal.model.per_byte_ms == pytest.approx(0.0004, rel=1e-6)
    assert cal.max_relative_residual < 1e-9


def test_espnow_fit_matches_lstsq_oracle():
    rows = testbed.measurements("ESP_NOW", 250)
    cal = calibrate(rows)
    (oracle,) = weighted_lstsq(rows, with_bytes=False)
    assert not cal.fitted_per_byte
    assert cal.model.per_packet_ms == pytest.approx(oracle, rel=1e-9)
    assert cal.model.per_packet_ms == pytest.approx(3.146, abs=0.01)


def test_multi_chunk_fit_matches_lstsq_oracle():
    rows = testbed.measurements("UDP")
    cal = calibrate(rows)
    oracle = weighted_lstsq(rows, with_bytes=True)
    assert (oracle > 0).all()
    assert cal.model.per_packet_ms == pytest.approx(oracle[0], rel=1e-6)
    assert cal.model.per_byte_ms == pytest.approx(oracle[1], rel=1e-6)


def test_negative_unconstrained_coefficient_is_clamped():
    # unconstrained least squares wants a negative per-packet cost here
    rows = testbed.measurements("TCP")
    assert weighted_lstsq(rows, with_bytes=True)[0] < 0
    cal = calibrate(rows)
    assert cal.model.per_packet_ms == 0.0
    y = np.array([m.latency_ms for m in rows])
    b = np.array([m.payload_bytes for m in rows], dtype=float)
    only_bytes = np.dot(b / y, np.ones_like(y)) / np.dot(b / y, b / y)
    assert cal.model.per_byte_ms == pytest.approx(only_bytes, rel=1e-6)


def test_tcp_stall_factor():
    rows = testbed.measurements("TCP", 1460)
    cal = calibrate(rows, stall_threshold=100)
    assert cal.model.stall.stall_factor > 1.0
    stalled = [r for r in cal.residuals if not r.used_in_fit]
    assert [r.measurement.payload_bytes for r in stalled] == [150528]
    # with a single stalled row the factor reproduces it exactly
    assert stalled[0].predicted_ms == pytest.approx(563.3)


@pytest.mark.parametrize("rows", [
    [Measurement(5488, 250, 69.2)],
    [Measurement(5488, 250, 69.2), Measurement(5400, 250, 68.0)],
    [Measurement(5488, 250, 0.0), Measurement(2744, 250, 34.6)],
])
def test_degenerate_fits(rows):
    with pytest.raises(DegenerateFitError):
        calibrate(rows)


def test_stall_exclusion_can_leave_too_few_rows():
    with pytest.raises(DegenerateFitError):
        calibrate(testbed.measurements("TCP", 1460), stall_threshold=2)


def test_link_model_file_round_trip(tmp_path):
    models = testbed.link_models()
    path = tmp_path / "links.json"
    save_link_models(models, path)
    assert load_link_models(path) == models


def test_link_model_rejects_bad_fields():
    with pytest.raises(ValueError):
        LinkModel.from_dict({"per_packet_ms": 1.0, "bogus": 2})
    with pytest.raises(ValueError):
        LinkModel(per_packet_ms=-1.0)


def test_measurement_csv(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text(testbed.measurements_csv())
    rows = read_measurements_csv(path)
    assert len(rows) == 24
    assert rows[0] == Measurement(150528, 1472, 145.1, "UDP")
    path.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        read_measurements_csv(path)


def test_rtt_is_sum_of_stages(graph):
    plan = split(graph, "block_16_project_BN")
    link = LinkModel(3.0, setup_ms=48.0, feedback_ms=1.0)
    bd = estimate_rtt(plan, PROFILES["ESP_NOW"], link, StageTimings())
    assert [s for s, _ in bd.entries] == list(RTT_STAGES)
    assert bd.get("Transmission") == pytest.approx(66.0)
    assert bd.total_ms == pytest.approx(math.fsum(ms for _, ms in bd.entries))
    assert bd.n_packets == 22


def test_zero_stages_give_transfer_only(graph):
    plan = split(graph, "block_16_project_BN")
    link = LinkModel(3.0, setup_ms=48.0, feedback_ms=1.0)
    bd = estimate_rtt(plan, PROFILES["ESP_NOW"], link, StageTimings.zeros())
    assert bd.total_ms == bd.get("Transmission") == pytest.approx(66.0)


def test_stage_overrides_take_precedence(graph):
    plan = split(graph, "block_16_project_BN")
    link = LinkModel(1.0, setup_ms=100.0, feedback_ms=5.0)
    st = StageTimings.from_dict({"setup_ms": 1.0})
    assert estimate_rtt(plan, PROFILES["UDP"], link, st).get("Protocol setup") == 1.0
    with pytest.raises(ValueError):
        StageTimings.from_dict({"warp_ms": 1.0})
    with pytest.raises(ValueError):
        StageTimings(inference_1_ms=-5)


def test_ranking_ties_break_by_name(graph):
    plan = split(graph, "block_16_project_BN")
    links = {"UDP": LinkModel(1.0), "TCP": LinkModel(1.0)}
    ranked = compare_protocols(plan, links, StageTimings.zeros(), {"UDP": 1460, "TCP": 1460})
    assert [r.protocol for r in ranked] == ["TCP", "UDP"]
    assert [r.rank for r in ranked] == [1, 2]
    with pytest.raises(ValueError):
        compare_protocols(plan, {"UDP": LinkModel(1.0)})


def test_transfer_only_ranking(graph):
    plan = split(graph, "block_2_expand")
    ranked = compare_protocols(plan, testbed.link_models(), transfer_only=True)
    assert [r.protocol for r in ranked] == ["UDP", "TCP", "ESP_NOW", "BLE"]
