import json

import pytest

from angelfish import cli
from angelfish.checks import SafetyReport, Verdict
from angelfish.dag import DagStore, to_dot
from angelfish.harness import (
    SUITE_FAULTS,
    ScenarioConfig,
    merge_metrics,
    parse_dot_spec,
    run_seed,
    suite_scenario,
)


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError, match="unknown config keys: bogus"):
        ScenarioConfig.from_dict({"n": 4, "bogus": 1})
    with pytest.raises(ValueError):
        ScenarioConfig(delay_model="warp")
    with pytest.raises(ValueError):
        ScenarioConfig(n=4, f=2)


def test_config_defaults():
    cfg = ScenarioConfig(n=10, delta=3)
    assert cfg.f == 3 and cfg.timeout_tau == 6
    assert ScenarioConfig.from_dict(cfg.to_dict()) == cfg


def test_fault_free_latency_histograms():
    cfg = ScenarioConfig(n=4, rbc="fast_path", delta_min=1, delta=1, max_time=60, check="safety")
    m = run_seed(cfg, 0).metrics
    assert max(m.lv_commit_latency, key=m.lv_commit_latency.get) == 3
    assert max(m.nlv_commit_latency, key=m.nlv_commit_latency.get) == 5
    assert all(m.safety.values())


def test_metrics_reproducible_per_seed():
    cfg = ScenarioConfig(n=7, delay_model="adversarial", gst=20, check="all", count_bytes=True)
    a = run_seed(cfg, 4).metrics.to_dict()
    b = run_seed(cfg, 4).metrics.to_dict()
    assert a == b
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)
    merged = merge_metrics([run_seed(cfg, 4).metrics, run_seed(cfg, 5).metrics])
    assert merged["runs"] == 2 and merged["safety_failures"] == 0


def test_empty_dag_dot_is_header_only():
    text = to_dot(DagStore(lambda r, s: False))
    assert "->" not in text and "cluster" not in text
    assert text.startswith("digraph dag {")


def test_leader_edge_skipping_two_rounds_is_bold():
    # parties 3 and 4 lead rounds 3 and 4 and never speak; party 5 leads
    # round 5 and links straight back to the round-2 leader vertex
    cfg = ScenarioConfig(n=7, faults={"crashes": {3: 0, 4: 0}}, max_time=60, check="safety")
    res = run_seed(cfg, 0)
    assert res.safe
    node = res.sim.nodes[0]
    lv5 = node.dag.get_vertex(5, 5)
    assert [(e.round, e.source) for e in lv5.leader_edges] == [(2, 2)]
    assert [tc.round for tc in lv5.tcs] == [3, 4]
    text = to_dot(node.dag, range(1, 8))
    assert '"r5_p5" -> "r2_p2" [style=bold];' in text


def test_parse_dot_spec():
    assert parse_dot_spec("0:1-10") == (0, range(1, 11))
    assert parse_dot_spec("3") == (3, None)
    assert parse_dot_spec("2:5") == (2, range(5, 6))


def test_suite_scenarios_are_seeded():
    assert suite_scenario(7, "bracha", "crash", 3) == suite_scenario(7, "bracha", "crash", 3)
    for fault in SUITE_FAULTS:
        cfg = suite_scenario(7, "two_step", fault, 1)
        faulty = set(cfg.faults.get("crashes", {})) | set(cfg.faults.get("byzantine", {}))
        assert len(faulty) == (0 if fault == "fault_free" else 2)


# -- CLI ---------------------------------------------------------------------


def test_cli_ok(capsys):
    code = cli.main(["--rbc", "fast_path", "--seed", "0", "--seed", "1", "--max-time", "60"])
    out = json.loads(capsys.readouterr().out)
    assert code == cli.EXIT_OK
    assert out["runs"] == 2 and out["safety_failures"] == 0


def test_cli_config_error(tmp_path, capsys):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"n": 4, "speed": 9}))
    assert cli.main(["--config", str(path)]) == 1
    assert "speed" in capsys.readouterr().err


def test_cli_liveness_exit(tmp_path, capsys):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"n": 7, "rounds_after_gst": 0, "delay_model": "adversarial"}))
    assert cli.main(["--config", str(path), "--gst", "30"]) == cli.EXIT_LIVENESS
    assert "LIVENESS FLAG seed=0" in capsys.readouterr().err


def test_cli_safety_exit(monkeypatch, capsys):
    broken = SafetyReport([Verdict(False, "total_order", "parties 0 and 1 diverge at index 3", 3)])
    monkeypatch.setattr("angelfish.harness.check_run", lambda sim: broken)
    assert cli.main(["--seed", "7", "--max-time", "30"]) == cli.EXIT_SAFETY
    err = capsys.readouterr().err
    assert "SAFETY VIOLATION seed=7 total_order" in err
    assert len(err.strip().splitlines()) > 1  # trace excerpt follows


def test_cli_artifacts_and_manifest_rerun(tmp_path, capsys):
    out = tmp_path / "run"
    args = ["-n", "7", "--delay-model", "adversarial", "--gst", "20", "--seed", "3",
            "--out", str(out), "--dot", "0:1-6", "--trace", "--bytes"]
    assert cli.main(args) == cli.EXIT_OK
    capsys.readouterr()
    names = sorted(p.name for p in out.iterdir())
    assert names == ["dag_seed3_node0.dot", "manifest.json", "metrics.json", "trace_seed3.jsonl"]
    manifest = json.loads((out / "manifest.json").read_text())
    again = tmp_path / "again"
    cfg = dict(manifest["config"], out=str(again))
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    assert cli.main(["--config", str(tmp_path / "cfg.json")]) == cli.EXIT_OK
    first = json.loads((out / "metrics.json").read_text())
    second = json.loads((again / "metrics.json").read_text())
    assert first == second
    assert (out / "trace_seed3.jsonl").read_text() == (again / "trace_seed3.jsonl").read_text()
    assert (out / "dag_seed3_node0.dot").read_text().startswith("digraph node0 {")
