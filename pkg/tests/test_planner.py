import math

import pytest

from splitwire.catalog import UnknownLayerError, builtin_mobilenetv2_catalog, load_catalog
from splitwire.linksim import LinkModel
from splitwire.planner import PlanError, format_report, plan_report, report_to_csv, split
from splitwire.protocols import PROFILES, ChunkSizeError, get_profile, packet_count


@pytest.fixture(scope="module")
def graph():
    return builtin_mobilenetv2_catalog()


@pytest.mark.parametrize("nbytes,chunk,want", [
    (150528, 1460, 104), (150528, 1472, 103), (150528, 1200, 126), (150528, 250, 603),
    (5488, 250, 22), (2744, 250, 11), (5488, 1460, 4), (2744, 1460, 2),
    (0, 250, 0), (1, 250, 1), (250, 250, 1), (251, 250, 2),
])
def test_packet_count(nbytes, chunk, want):
    assert packet_count(nbytes, chunk) == want == math.ceil(nbytes / chunk)


def test_packet_count_rejects_zero_chunk():
    with pytest.raises(ChunkSizeError):
        packet_count(100, 0)


def test_profiles():
    assert PROFILES["ESP_NOW"].max_payload_bytes == 250
    assert PROFILES["UDP"].max_payload_bytes == 1472
    assert PROFILES["TCP"].max_payload_bytes == 1460
    assert PROFILES["BLE"].max_payload_bytes == 512
    assert get_profile("esp-now") is get_profile("espnow") is PROFILES["ESP_NOW"]
    with pytest.raises(KeyError):
        get_profile("zigbee")


def test_split_partitions_layers(graph):
    plan = split(graph, "block_16_project_BN")
    assert plan.part1_layers[-1] == "block_16_project_BN"
    assert list(plan.part1_layers + plan.part2_layers) == graph.layer_names
    assert plan.boundary_bytes == 5488


def test_split_errors(graph):
    with pytest.raises(UnknownLayerError):
        split(graph, "nope")
    with pytest.raises(PlanError):
        split(graph, "predictions")


def test_single_layer_graph_cannot_split():
    g = load_catalog({"model_name": "one", "input_shape": [1], "layers": [{"name": "x", "output_shape": [3]}]})
    with pytest.raises(PlanError):
        split(g, "x")


def test_report_counts_and_oversize(graph):
    plan = split(graph, "block_2_expand")
    rows = plan_report(plan, [PROFILES["UDP"], PROFILES["ESP_NOW"]], {"UDP": [1460, 1472], "ESP_NOW": [250, 300]})
    got = {(r.protocol, r.chunk_bytes): r for r in rows}
    assert got["UDP", 1460].n_packets == 104
    assert got["UDP", 1472].n_packets == 103
    assert got["ESP_NOW", 250].n_packets == 603
    bad = got["ESP_NOW", 300]
    assert bad.n_packets is None and "250" in bad.error


def test_report_with_link_model(graph):
    plan = split(graph, "block_16_project_BN")
    rows = plan_report(plan, [PROFILES["ESP_NOW"]], links={"ESP_NOW": LinkModel(3.0)})
    assert rows[0].predicted_latency_ms == pytest.approx(66.0)


def test_csv_and_table(graph):
    plan = split(graph, "block_16_project_BN")
    rows = plan_report(plan, [PROFILES["UDP"]], [1460, 5000])
    text = report_to_csv(rows)
    assert text.splitlines() == [
        "split_layer,protocol,chunk_bytes,n_packets,predicted_latency_ms",
        "block_16_project_BN,UDP,1460,4,",
    ]
    table = format_report(rows)
    assert "4 packets" in table and "error" in table
