import json
from pathlib import Path

import pytest

from swarm_pddp.cli import EXIT_ERROR, EXIT_INVALID, EXIT_NOT_CONVERGED, EXIT_OK, RunRecord, compare_table, main

TINY = Path(__file__).parent / "data" / "tiny.yaml"


def test_run_converged_exit_0(tmp_path, capsys):
    code = main(["run", "--config", str(TINY), "--out", str(tmp_path), "--no-svg"])
    assert code == EXIT_OK, capsys.readouterr().out
    payload = json.loads((tmp_path / "solution.json").read_text())
    assert payload["converged"] is True and payload["validation"]["ok"] is True


def test_run_not_converged_exit_2():
    # valid trajectories, but the stopping rule has not fired yet (converges at 147)
    assert main(["run", "--config", str(TINY), "--max-iter", "130"]) == EXIT_NOT_CONVERGED


def test_run_invalid_exit_3():
    # after three rounds the arrival times still disagree
    assert main(["run", "--config", str(TINY), "--max-iter", "3"]) == EXIT_INVALID


def test_usage_errors_exit_1(tmp_path):
    assert main(["run", "--config", str(TINY), "--scheme", "bogus"]) == EXIT_ERROR
    assert main(["run", "--config", str(TINY), "--scenario", "1"]) == EXIT_ERROR
    assert main(["run", "--config", str(TINY), "--max-iter", "0"]) == EXIT_ERROR
    assert main(["run", "--config", str(tmp_path / "nope.yaml")]) == EXIT_ERROR
    assert main([]) == EXIT_ERROR
    bad = tmp_path / "bad.yaml"
    bad.write_text("agents: 3\n")
    assert main(["run", "--config", str(bad)]) == EXIT_ERROR


def test_determinism_bit_identical(tmp_path):
    flags = ["run", "--config", str(TINY), "--scheme", "ap", "--max-iter", "25", "--trace"]
    for name in ("a", "b"):
        main(flags + [str(tmp_path / f"{name}.trace"), "--out", str(tmp_path / name)])
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert "solution.json" in files and "residuals.csv" in files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f
    assert (tmp_path / "a.trace").read_bytes() == (tmp_path / "b.trace").read_bytes()


def test_validate_roundtrip_and_tampering(tmp_path):
    out = tmp_path / "run"
    main(["run", "--config", str(TINY), "--max-iter", "40", "--out", str(out), "--no-svg"])
    sol = out / "solution.json"
    payload = json.loads(sol.read_text())
    assert main(["validate", str(sol)]) == (EXIT_OK if payload["validation"]["ok"] else EXIT_INVALID)

    # drag agent 1 onto agent 0: collision plus a broken rollout
    payload["agents"][1]["states"] = payload["agents"][0]["states"]
    bad = tmp_path / "tampered.json"
    bad.write_text(json.dumps(payload))
    assert main(["validate", str(bad)]) == EXIT_INVALID

    broken = tmp_path / "broken.json"
    broken.write_text("[]")
    assert main(["validate", str(broken)]) == EXIT_ERROR
    assert main(["validate", str(sol), "--scenario", "3"]) == EXIT_ERROR  # agent count mismatch


def test_compare_writes_table(tmp_path, capsys):
    code = main(["compare", "--config", str(TINY), "--scheme", "fixed", "--scheme", "fixed",
                 "--max-iter", "20", "--out", str(tmp_path)])
    assert code == EXIT_OK
    text = capsys.readouterr().out
    assert "0.00%" in text
    rows = (tmp_path / "compare.csv").read_text().splitlines()
    assert rows[0].startswith("scenario,scheme,iterations") and len(rows) == 3
    records = json.loads((tmp_path / "compare.json").read_text())
    assert records[0]["schema"] == "swarm-pddp/run-record"


def test_compare_needs_two_schemes():
    assert main(["compare", "--config", str(TINY), "--scheme", "ap"]) == EXIT_ERROR


def test_compare_table_marks_failed_cell():
    recs = [RunRecord("s", "fixed", 100, 1.0, True, [9.0], True),
            RunRecord("s", "ap", 0, 0.0, False, [], False, error="ValueError: boom")]
    text, table = compare_table(recs, ["s"], ["fixed", "ap"])
    assert "FAILED: ValueError: boom" in text
    assert table.splitlines()[2] == "s,ap,,,,,"
    text, _ = compare_table([recs[0], RunRecord("s", "ap", 70, 1.0, True, [9.0], True)], ["s"], ["fixed", "ap"])
    assert "30.00%" in text
