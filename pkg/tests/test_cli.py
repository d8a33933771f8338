from __future__ import annotations

import json

import pytest

from memsci.cli import main
from memsci.fixtures import gen_fixture
from memsci.hamiltonian import TABLE_MAGIC, load_tables


@pytest.fixture
def fcidump(tmp_path):
    path = tmp_path / "h.fcidump"
    path.write_text(gen_fixture(3, 10, 4, strength=0.02, gap=1.5))
    return path


def error_line(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    return json.loads(err[0])


def test_solve_happy_path(fcidump, tmp_path, capsys):
    report = tmp_path / "out.json"
    assert main(["solve", "--fcidump", str(fcidump), "--topk", "10", "--tol", "1e-8", "--report", str(report)]) == 0
    doc = json.loads(report.read_text())
    assert doc["schema"] == 1
    assert doc["verdict"] in {"converged", "saturated", "max_iters"}
    assert doc["iterations"][-1]["energy"] == doc["energy"]
    assert {"iteration", "energy", "n_selected", "unique", "redundancy", "delta"} <= set(doc["iterations"][0])


def test_solve_stdout_and_csv(fcidump, tmp_path, capsys):
    csv_path = tmp_path / "out.csv"
    assert main(["solve", "--fcidump", str(fcidump), "--topk", "3", "--max-iters", "3", "--csv", str(csv_path)]) == 0
    doc = json.loads(capsys.readouterr().out)
    rows = csv_path.read_text().splitlines()
    assert rows[0] == "iteration,energy,n_selected,unique,redundancy"
    assert len(rows) == 1 + len(doc["iterations"])
    assert float(rows[-1].split(",")[1]) == doc["energy"]


def test_reports_are_byte_identical(fcidump, tmp_path):
    outs = []
    for tag in "ab":
        rep, csv_path = tmp_path / f"{tag}.json", tmp_path / f"{tag}.csv"
        args = ["solve", "--fcidump", str(fcidump), "--topk", "4", "--ranks", "2", "--max-iters", "5"]
        assert main(args + ["--report", str(rep), "--csv", str(csv_path)]) == 0
        outs.append((rep.read_bytes(), csv_path.read_bytes()))
    assert outs[0] == outs[1]


def test_missing_file(capsys):
    assert main(["solve", "--fcidump", "/nonexistent/x.fcidump"]) == 3
    err = error_line(capsys)
    assert err["error"] == "missing_file" and "/nonexistent/x.fcidump" in err["message"]


def test_unknown_flag(fcidump, capsys):
    assert main(["solve", "--fcidump", str(fcidump), "--frobnicate"]) == 2
    assert error_line(capsys)["error"] == "usage"
    assert main(["nope"]) == 2
    error_line(capsys)


def test_infeasible_budget(fcidump, capsys):
    assert main(["solve", "--fcidump", str(fcidump), "--budget-mb", "0.001"]) == 4
    assert error_line(capsys)["error"] == "budget_infeasible"


def test_bad_fcidump(tmp_path, capsys):
    bad = tmp_path / "bad.fcidump"
    bad.write_text("&FCI NORB=2, NELEC=2\n&END\nabc 1 1 0 0\n")
    assert main(["fci", "--fcidump", str(bad)]) == 5
    assert error_line(capsys)["line"] == 3


def test_fci(fcidump, capsys):
    assert main(["fci", "--fcidump", str(fcidump)]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["dimension"] == 210 and doc["energy"] < 0


def test_dedup_bench(tmp_path, capsys):
    assert main(["dedup-bench", "--ranks", "4", "--keys", "20000", "--dist", "zipf:1.1", "--figures", str(tmp_path)]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert len(doc["per_rank_counts"]) == 4 and doc["max_min_ratio"] >= 1
    assert (tmp_path / "balance.png").stat().st_size > 0


def test_dedup_bench_bad_dist(capsys):
    assert main(["dedup-bench", "--dist", "gauss"]) == 2


def test_gen_bench(fcidump, tmp_path, capsys):
    csv_path = tmp_path / "g.csv"
    assert main(["gen-bench", "--fcidump", str(fcidump), "--sources-per-rank", "5", "--ranks", "1,2,4", "--csv", str(csv_path)]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert [p["ranks"] for p in doc["points"]] == [1, 2, 4]
    assert len(csv_path.read_text().splitlines()) == 4


def test_tables(fcidump, tmp_path, capsys):
    blob = tmp_path / "t.bin"
    assert main(["tables", "--fcidump", str(fcidump), "--out", str(blob)]) == 0
    doc = json.loads(capsys.readouterr().out)
    data = blob.read_bytes()
    assert data[:8] == TABLE_MAGIC and len(data) == doc["footprint_bytes"]
    assert load_tables(data).max_single_size == doc["max_single_size"] == 4


def test_fixture_command(tmp_path):
    out = tmp_path / "f.fcidump"
    assert main(["fixture", "--seed", "2", "--m", "8", "--n", "2", "--out", str(out)]) == 0
    assert out.read_text() == gen_fixture(2, 8, 2)


def test_figures_and_trace(fcidump, tmp_path):
    figs, trace = tmp_path / "figs", tmp_path / "trace.json"
    args = ["solve", "--fcidump", str(fcidump), "--topk", "4", "--max-iters", "3", "--report", str(tmp_path / "r.json")]
    assert main(args + ["--figures", str(figs), "--trace", str(trace), "--reference-energy", "-1.0"]) == 0
    assert {p.name for p in figs.iterdir()} == {"convergence.png", "redundancy.png"}
    t = json.loads(trace.read_text())
    assert t["budget_bytes"] is None and t["peak_bytes"] > 0


def test_spill_dir_and_no_overlap(fcidump, tmp_path):
    base = ["solve", "--fcidump", str(fcidump), "--topk", "4", "--max-iters", "3"]
    assert main(base + ["--report", str(tmp_path / "a.json")]) == 0
    spill = tmp_path / "spill"
    assert main(base + ["--report", str(tmp_path / "b.json"), "--budget-mb", "0.2", "--spill-dir", str(spill), "--no-overlap"]) == 0
    a, b = (json.loads((tmp_path / f"{x}.json").read_text()) for x in "ab")
    assert [r["unique_sha256"] for r in a["iterations"]] == [r["unique_sha256"] for r in b["iterations"]]
    assert a["energy"] == pytest.approx(b["energy"], abs=1e-12)
