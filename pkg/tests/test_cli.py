from __future__ import annotations

import json
import time
from pathlib import Path

import pytest

from udsmon.cli import EXIT_COVERAGE, EXIT_OK, EXIT_PARSE, EXIT_USAGE, main

GOLDEN = Path(__file__).parent / "golden"


def test_catalog_rows(capsys):
    assert main(["catalog"]) == EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 53 and lines[0].startswith("AT-RD-1\t")


def test_catalog_json(capsys):
    assert main(["catalog", "--format", "json"]) == EXIT_OK
    rows = json.loads(capsys.readouterr().out)
    assert len(rows) == 53 and rows[0]["id"] == "AT-RD-1"


def test_stats(capsys):
    start = time.perf_counter()
    assert main(["stats", "--format", "json"]) == EXIT_OK
    assert time.perf_counter() - start < 1.0
    stats = json.loads(capsys.readouterr().out)
    assert stats["autosar_supported_sids"] == 13 and stats["context_table_sids"] == 26
    assert (stats["autosar_full"], stats["autosar_partial"]) == (20, 10)
    assert stats["detectable_techniques"] == 52


def test_simulate_twice_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["simulate", "AT-CL-3", "--seed", "7", "--out", str(tmp_path / name)]) == EXIT_OK
    for f in (tmp_path / "a").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_simulate_unknown_technique(tmp_path, capsys):
    assert main(["simulate", "AT-XX-9", "--seed", "0", "--out", str(tmp_path)]) == EXIT_USAGE
    assert "AT-XX-9" in capsys.readouterr().err


def test_simulate_needs_out():
    assert main(["simulate", "AT-PE-4"]) == EXIT_USAGE


@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["stats", "--format", "xml"], ["coverage", "--seed", "x"]])
def test_usage_errors(argv):
    with pytest.raises(SystemExit) as info:
        main(argv)
    assert info.value.code == EXIT_USAGE


def test_replay_matches_golden(tmp_path):
    assert main(["simulate", "AT-PE-4", "--seed", "0", "--out", str(tmp_path / "sc")]) == EXIT_OK
    out = tmp_path / "report.json"
    assert main(["replay", str(tmp_path / "sc"), "--format", "json", "--out", str(out)]) == EXIT_OK
    report = json.loads(out.read_text())
    assert report == json.loads((GOLDEN / "replay_AT-PE-4_seed0.json").read_text())
    assert any(a["strategy"] == "SLP" and "AT-PE-4" in a["techniques"] for a in report["alerts"])


def test_replay_with_explicit_files(tmp_path, capsys):
    sc = tmp_path / "sc"
    main(["simulate", "AT-PS-1", "--seed", "0", "--out", str(sc)])
    capsys.readouterr()
    argv = ["replay", str(sc / "trace.ndjson"), "--store", str(sc / "store.yaml"),
            "--topology", str(sc / "topology.yaml"), "--ti", str(sc / "ti.ndjson")]
    assert main(argv) == EXIT_OK
    assert "firmware-not-authorized" in capsys.readouterr().out


def test_replay_empty_trace(tmp_path, capsys):
    trace = tmp_path / "empty.ndjson"
    trace.write_text("")
    assert main(["replay", str(trace)]) == EXIT_OK
    assert "alerts: 0" in capsys.readouterr().out


def test_replay_malformed_hex(tmp_path, capsys):
    trace = tmp_path / "bad.ndjson"
    trace.write_text('{"timestamp":0,"link":"pt","source":1,"target_ecu":"ECM","request":"2g01","response":null}\n')
    assert main(["replay", str(trace)]) == EXIT_PARSE
    assert f"{trace}:1:" in capsys.readouterr().err


def test_replay_missing_file(tmp_path):
    assert main(["replay", str(tmp_path / "none.ndjson")]) == EXIT_PARSE


def test_replay_bad_store(tmp_path, capsys):
    trace = tmp_path / "t.ndjson"
    trace.write_text("")
    store = tmp_path / "store.yaml"
    store.write_text("vehicles:\n  - {vehicle_id: V, model: M, maintenance: [{start: 9, end: 1}]}\n")
    assert main(["replay", str(trace), "--store", str(store)]) == EXIT_PARSE
    assert str(store) in capsys.readouterr().err


def test_coverage_subset_and_failure(tmp_path, capsys):
    assert main(["coverage", "--technique", "AT-PE-4", "--technique", "AT-CL-3"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "AT-PE-4" in out and "AT-CL-3" in out and "AT-PS-1" not in out
    empty = tmp_path / "rules.yaml"
    empty.write_text("slp: []\nclc: []\n")
    assert main(["coverage", "--technique", "AT-PE-4", "--rules", str(empty)]) == EXIT_COVERAGE


def test_coverage_reproducible(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert main(["coverage", "--seed", "3", "--format", "json", "--out", str(a)]) == EXIT_OK
    assert main(["coverage", "--seed", "3", "--format", "json", "--out", str(b)]) == EXIT_OK
    assert a.read_bytes() == b.read_bytes()
    doc = json.loads(a.read_text())
    assert [r["technique"] for r in doc["rows"]][:3] == ["AT-RD-1", "AT-RD-2", "AT-PS-1"]
