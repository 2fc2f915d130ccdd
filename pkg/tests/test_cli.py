import csv
import io
import json
import socket
import subprocess
import sys

import pytest

from splitwire import testbed
from splitwire.cli import main
from splitwire.linksim import StageTimings

TABLE_II_COUNTS = {
    ("block_2_expand", 1472): 103, ("block_2_expand", 1460): 104, ("block_2_expand", 1200): 126,
    ("block_2_expand", 250): 603,
    ("block_15_project", 1472): 2, ("block_15_project", 1460): 2, ("block_15_project", 1200): 3,
    ("block_15_project", 250): 11,
    ("block_16_project_BN", 1472): 4, ("block_16_project_BN", 1460): 4, ("block_16_project_BN", 1200): 5,
    ("block_16_project_BN", 250): 22,
}


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_plan_single_split(capsys):
    code, out, _ = run(capsys, "plan", "--split", "block_16_project_BN", "--protocol", "udp", "--chunk", "1460")
    assert code == 0
    assert "4 packets" in out


def test_plan_unknown_layer(capsys):
    code, _, err = run(capsys, "plan", "--split", "bogus_layer")
    assert code == 2
    assert "bogus_layer" in err


def test_plan_oversized_chunk_is_config_error(capsys):
    code, _, err = run(capsys, "plan", "--split", "block_16_project_BN", "--protocol", "esp-now", "--chunk", "300")
    assert code == 2 and "300" in err


def test_plan_reference_splits_csv(capsys):
    code, out, _ = run(capsys, "plan", "--all-paper-splits", "--format", "csv")
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert len(rows) == 21
    assert {r["protocol"] for r in rows} == {"UDP", "TCP", "ESP_NOW"}
    for r in rows:
        assert int(r["n_packets"]) == TABLE_II_COUNTS[r["split_layer"], int(r["chunk_bytes"])]


def test_plan_with_link_model_predicts_latency(capsys, tmp_path):
    path = tmp_path / "links.json"
    code, _, _ = run(capsys, "calibrate", "--paper-defaults", "--out", str(path))
    assert code == 0
    code, out, _ = run(capsys, "plan", "--split", "block_16_project_BN", "--protocol", "esp-now",
                       "--link-model", str(path), "--format", "json")
    row = json.loads(out)["rows"][0]
    assert row["n_packets"] == 22
    assert row["predicted_latency_ms"] == pytest.approx(69.2, rel=0.01)


def test_simulate_reference_ranking(capsys):
    code, out, _ = run(capsys, "simulate", "--split", "block_16_project_BN", "--paper-defaults", "--format", "json")
    assert code == 0
    doc = json.loads(out)
    assert [r["protocol"] for r in doc["ranking"]] == ["ESP_NOW", "UDP", "TCP", "BLE"]


def test_simulate_table_output(capsys):
    code, out, _ = run(capsys, "simulate", "--paper-defaults")
    assert code == 0
    assert "Transmission" in out and "measured RTT" in out


def test_simulate_zero_stages_is_transfer_only(capsys, tmp_path):
    stages = tmp_path / "zero.json"
    stages.write_text(json.dumps(StageTimings.zeros().to_dict()))
    code, out, _ = run(capsys, "simulate", "--paper-defaults", "--stages", str(stages), "--format", "csv")
    assert code == 0
    for r in csv.DictReader(io.StringIO(out)):
        assert r["rtt_ms"] == r["transfer_ms"]


def test_simulate_needs_links(capsys):
    code, _, err = run(capsys, "simulate")
    assert code == 2 and "link-model" in err


def test_calibrate_espnow_csv(capsys, tmp_path):
    lines = [l for l in testbed.measurements_csv().splitlines() if l.startswith(("protocol", "ESP_NOW"))]
    path = tmp_path / "espnow.csv"
    path.write_text("\n".join(lines) + "\n")
    out_path = tmp_path / "model.json"
    code, out, _ = run(capsys, "calibrate", "--csv", str(path), "--out", str(out_path), "--format", "json")
    assert code == 0
    doc = json.loads(out)
    assert doc["ESP_NOW"]["link_model"]["per_packet_ms"] == pytest.approx(3.146, abs=0.01)
    saved = json.loads(out_path.read_text())
    assert saved["link_models"]["ESP_NOW"]["per_packet_ms"] == pytest.approx(3.146, abs=0.01)


def test_calibrate_degenerate_exit_3(capsys, tmp_path):
    path = tmp_path / "one.csv"
    path.write_text("protocol,chunk_bytes,payload_bytes,latency_ms\nUDP,1460,5488,3.2\nUDP,1460,5400,3.1\n")
    code, _, err = run(capsys, "calibrate", "--csv", str(path))
    assert code == 3
    assert "degenerate" in err


def test_calibrate_missing_file(capsys, tmp_path):
    code, _, _ = run(capsys, "calibrate", "--csv", str(tmp_path / "nope.csv"))
    assert code == 2


@pytest.mark.parametrize("argv", [
    ("plan", "--all-paper-splits", "--format", "csv"),
    ("plan", "--all-paper-splits", "--paper-defaults", "--format", "json"),
    ("simulate", "--paper-defaults", "--format", "json"),
    ("calibrate", "--paper-defaults", "--format", "json"),
    ("ota", "--format", "json", "--inject-corruption"),
    ("run", "--monolithic", "--format", "json"),
])
def test_deterministic_output(capsys, argv):
    _, first, _ = run(capsys, *argv)
    _, second, _ = run(capsys, *argv)
    assert first == second
    if "json" in argv:
        json.loads(first)


def test_run_both_udp_matches_monolithic(capsys):
    code, out, _ = run(capsys, "run", "--both", "--transport", "udp", "--chunk", "1460", "--format", "json")
    assert code == 0
    split_doc = json.loads(out)
    _, out, _ = run(capsys, "run", "--monolithic", "--format", "json")
    mono = json.loads(out)
    assert split_doc["predictions"] == mono["predictions"]
    assert split_doc["activation_frames"] == 4


def test_run_inmem_espnow_trace(capsys):
    code, out, _ = run(capsys, "run", "--both", "--transport", "inmem", "--profile", "esp-now", "--format", "csv")
    assert code == 0
    trace = out[out.index("stage,device"):]
    rows = {r["stage"]: r for r in csv.DictReader(io.StringIO(trace))}
    assert rows["Transmission"]["frames"] == "22"
    assert "RTT" in rows


def test_run_transport_failure_exit_4(capsys):
    code, out, err = run(capsys, "run", "--both", "--transport", "inmem", "--loss", "1.0",
                         "--ack-timeout", "0.002", "--timeout", "0.5")
    assert code == 4
    assert "FAILED" in out and "transport" in err


def test_run_role_needs_socket(capsys):
    code, _, _ = run(capsys, "run", "--role", "server", "--transport", "inmem")
    assert code == 2


def _free_port(kind):
    s = socket.socket(socket.AF_INET, socket.SOCK_DGRAM if kind == "udp" else socket.SOCK_STREAM)
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    return port


@pytest.mark.parametrize("transport", ["udp", "tcp"])
def test_run_server_and_client_processes(capsys, transport):
    port = str(_free_port(transport))
    server = subprocess.Popen(
        [sys.executable, "-m", "splitwire.cli", "run", "--role", "server", "--transport", transport,
         "--port", port, "--timeout", "10"],
        stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True,
    )
    try:
        assert server.stderr.readline().startswith("listening on")
        code, out, _ = run(capsys, "run", "--role", "client", "--transport", transport, "--port", port,
                           "--format", "json")
        srv_out, _ = server.communicate(timeout=20)
    finally:
        server.kill()
    assert code == 0 and server.returncode == 0
    _, mono, _ = run(capsys, "run", "--monolithic", "--format", "json")
    assert json.loads(out)["predictions"] == json.loads(mono)["predictions"]
    assert "Inference,2" in srv_out


def test_ota_corruption_rolls_back(capsys):
    code, out, _ = run(capsys, "ota", "--inject-corruption")
    assert code == 0
    assert out.strip().splitlines()[-1].startswith("final state: RolledBack")


def test_ota_json(capsys):
    code, out, _ = run(capsys, "ota", "--format", "json")
    doc = json.loads(out)
    assert doc["final_state"] == "Active" and doc["active_version"] == "1.1.0"
    assert doc["audit"][-1]["to"] == "Active"
    code, out, _ = run(capsys, "ota", "--fail-post-validate", "--format", "json")
    doc = json.loads(out)
    assert doc["final_state"] == "RolledBack" and doc["active_version"] == "1.0.0"


def test_argparse_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as info:
        main(["plan", "--format", "xml"])
    assert info.value.code == 2
