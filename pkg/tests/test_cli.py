import json
import socket

import pytest

from tandemserve.cli import main


@pytest.fixture
def scenario_file(tmp_path):
    scenario = {
        "name": "cli-smoke",
        "vocab_size": 8,
        "draft_model": {"kind": "ngram", "n": 2,
                        "corpus": [0, 1, 2, 3, 4, 5, 6, 7, 1, 3, 5, 7, 0, 2, 4, 6]},
        "target_model": {"kind": "ngram", "n": 2,
                         "corpus": [7, 6, 5, 4, 3, 2, 1, 0, 2, 4, 6, 0, 1, 5, 3, 7]},
        "importance": {"kind": "entropy"},
        "workload": {"synthetic": {"prompt_len": 3, "seed": 5}},
        "session": {"max_len": 16, "gamma": 4, "budget": 0.4, "delta": 4, "seed": 9},
        "policy": {"c_th": 0.9, "i_th": 0.05},
        "channel": {"bandwidth_bps": 1e6, "propagation_delay_ms": 5.0},
        "cost": {"per_token_forward_cost": 0.001, "fixed_iteration_overhead": 0.001},
        "device_cost": {"draft_seconds_per_token": 0.001},
        "sessions": 1,
        "seed": 9,
    }
    path = tmp_path / "scenario.json"
    path.write_text(json.dumps(scenario))
    return path


def test_profile_command(scenario_file, tmp_path, capsys):
    out = tmp_path / "profile.json"
    assert main(["profile", "--scenario", str(scenario_file), "--out", str(out)]) == 0
    record = json.loads(out.read_text())
    assert 0 < record["alpha"] < 1
    assert record["importance_cdf"]
    assert "profiled" in capsys.readouterr().out


def test_run_command_with_figures(scenario_file, tmp_path, capsys):
    out_dir = tmp_path / "run"
    code = main(["run", "--scenario", str(scenario_file), "--out-dir", str(out_dir), "--figures"])
    assert code == 0
    assert (out_dir / "tokens.csv").exists()
    assert (out_dir / "report.json").exists()
    assert (out_dir / "timeline.png").exists()
    printed = capsys.readouterr().out
    assert "mean_tbt" in printed and "figure:" in printed


def test_run_with_profile_backed_policy(scenario_file, tmp_path):
    profile_path = tmp_path / "profile.json"
    assert main(["profile", "--scenario", str(scenario_file), "--out", str(profile_path)]) == 0
    scenario = json.loads(scenario_file.read_text())
    scenario["policy"] = {"profile": str(profile_path)}
    profiled = tmp_path / "profiled.json"
    profiled.write_text(json.dumps(scenario))
    assert main(["run", "--scenario", str(profiled), "--out-dir", str(tmp_path / "out")]) == 0


def test_sweep_command(scenario_file, tmp_path, capsys):
    out_dir = tmp_path / "sweep"
    code = main([
        "sweep", "--scenario", str(scenario_file), "--knob", "bandwidth",
        "--values", "100000,1000000", "--out-dir", str(out_dir), "--figures",
    ])
    assert code == 0
    lines = (out_dir / "sweep_bandwidth.csv").read_text().splitlines()
    assert len(lines) == 3
    assert any(p.suffix == ".png" for p in out_dir.iterdir())


def test_report_command_requires_input(tmp_path):
    assert main(["report"]) == 2


def test_bad_scenario_file_is_diagnosed(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    assert main(["run", "--scenario", str(bad), "--out-dir", str(tmp_path / "x")]) == 2
    assert "error:" in capsys.readouterr().err


def test_serve_and_device_over_socket(scenario_file, tmp_path):
    # pick a free port, host the cloud in a thread, run device sessions
    # against it with the CLI entry points
    probe = socket.socket()
    probe.bind(("127.0.0.1", 0))
    port = probe.getsockname()[1]
    probe.close()

    from tandemserve.bench import Scenario, build_model
    from tandemserve.cloud import CloudRuntime, CloudServer, ComputeCostModel

    scenario = Scenario.from_file(scenario_file)
    runtime = CloudRuntime(
        engine=build_model(scenario.target_model, scenario.vocab_size),
        cost_model=ComputeCostModel(per_token_forward_cost=0.0, fixed_iteration_overhead=0.0),
    )
    server = CloudServer(runtime, host="127.0.0.1", port=port)
    server.start()
    try:
        out_dir = tmp_path / "device"
        code = main([
            "device", "--scenario", str(scenario_file),
            "--host", "127.0.0.1", "--port", str(port),
            "--out-dir", str(out_dir),
        ])
        assert code == 0
        lines = (out_dir / "sessions.jsonl").read_text().splitlines()
        assert len(lines) == 1
        record = json.loads(lines[0])
        assert record["generated"] == 16
    finally:
        server.stop()
    assert runtime.status()["verifies_served"] >= record["offload_chunks"]
