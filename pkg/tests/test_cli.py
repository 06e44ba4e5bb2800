import json

from farswap.cli import main


def _write(tmp_path, raw):
    p = tmp_path / "s.json"
    p.write_text(json.dumps(raw))
    return str(p)


RAW = {
    "tenants": [{"name": "a", "local_mem_pages": 256, "remote_partition_pages": 2048, "swap_cache_bytes": 32 * 4096}],
    "workloads": [{"tenant": "a", "kind": "uniform", "footprint_pages": 512, "ops_per_thread": 500, "rate": 1e5}],
    "seed": 1,
}


def test_run_writes_report_log_and_csv(tmp_path):
    cfg = _write(tmp_path, RAW)
    out = tmp_path / "r.json"
    code = main(["run", "--config", cfg, "--out", str(out), "--event-log", str(tmp_path / "ev.log"),
                 "--sched-trace", str(tmp_path / "s.csv"), "--csv", str(tmp_path / "csv")])
    assert code == 0
    rep = json.loads(out.read_text())
    assert rep["tenants"][0]["finished"]
    assert (tmp_path / "ev.log").read_text()
    assert (tmp_path / "s.csv").read_text().startswith("time_ns,tenant,kind,queue_delay_ns,decision")
    assert sorted(p.name for p in (tmp_path / "csv").iterdir()) == ["allocator.csv", "counters.csv", "latency_cdf.csv"]


def test_run_seed_override_changes_result(tmp_path, capsys):
    cfg = _write(tmp_path, RAW)
    main(["run", "--config", cfg, "--seed", "1"])
    a = capsys.readouterr().out
    main(["run", "--config", cfg, "--seed", "2"])
    b = capsys.readouterr().out
    assert json.loads(a)["seed"] == 1 and json.loads(b)["seed"] == 2
    assert a != b


def test_bad_config_exit_code(tmp_path, capsys):
    raw = json.loads(json.dumps(RAW))
    raw["tenants"][0]["bandwidth_weight"] = 0
    assert main(["run", "--config", _write(tmp_path, raw)]) == 2
    assert "bandwidth_weight" in capsys.readouterr().err


def test_generate_trace_and_report(tmp_path, capsys):
    out = tmp_path / "t.csv"
    spec = '{"kind": "sequential", "footprint_pages": 10, "ops_per_thread": 25}'
    assert main(["generate-trace", "--spec", spec, "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 26  # thread tag plus 25 reads
    cfg = _write(tmp_path, RAW)
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    main(["run", "--config", cfg, "--out", str(a)])
    main(["run", "--config", cfg, "--out", str(b)])
    capsys.readouterr()
    assert main(["report", "--compare", str(a), str(b)]) == 0
    text = capsys.readouterr().out
    assert "1.000" in text and "WMMR" in text


def test_unbounded_generate_needs_limit(tmp_path):
    spec = '{"kind": "uniform", "footprint_pages": 10}'
    assert main(["generate-trace", "--spec", spec, "--out", str(tmp_path / "x")]) == 2
    assert main(["generate-trace", "--spec", spec, "--limit", "5", "--out", str(tmp_path / "x")]) == 0
