import csv
import io
import subprocess
import sys

import numpy as np
import pytest
import yaml

from coupled_pimh import cli, harness


def run(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_coupled_stdout(capsys):
    code, out, _ = run(["coupled", "--T", "10", "--N", "8", "--replicates", "3", "--seed", "1", "--m", "2"], capsys)
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out.split("\n\n")[0])))
    assert [r["replicate"] for r in rows] == ["0", "1", "2"]
    assert {"tau", "pf_calls", "estimate_0"} <= set(rows[0])


def test_large_sample_columns(tmp_path, capsys):
    out = tmp_path / "ls.csv"
    code, _, _ = run(["large-sample", "--sigma", "1.0", "--n-max", "4", "--out", str(out), "--plot-data"], capsys)
    assert code == 0
    rows = list(csv.DictReader(out.open()))
    assert list(rows[0]) == ["n", "pmf", "survival"] and len(rows) == 4
    assert np.loadtxt(tmp_path / "ls.pmf.dat").shape == (4, 2)
    assert (tmp_path / "ls.summary.csv").exists()


def test_config_file_and_override(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"kind": "coupled", "T": 10, "N": 8, "replicates": 5, "m": 1}))
    out = tmp_path / "o.csv"
    code, _, _ = run(["coupled", "--config", str(cfg), "--replicates", "2", "--out", str(out)], capsys)
    assert code == 0
    assert len(list(csv.DictReader(out.open()))) == 2


def test_same_seed_same_bytes(tmp_path, capsys):
    args = ["coupled", "--T", "10", "--N", "8", "--replicates", "4", "--seed", "9", "--m", "2"]
    run(args + ["--out", str(tmp_path / "a.csv")], capsys)
    run(args + ["--threads", "2", "--out", str(tmp_path / "b.csv")], capsys)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


@pytest.mark.parametrize(
    "argv",
    [
        ["coupled", "--k", "3", "--m", "1"],
        ["coupled", "--N", "0"],
        ["coupled", "--h", "nonsense", "--T", "5", "--replicates", "2"],
        ["inefficiency-grid", "--T", "5"],
        ["coupled", "--config", "/nonexistent.yaml"],
    ],
)
def test_errors_exit_nonzero(argv, capsys):
    code, _, err = run(argv, capsys)
    assert code == 2 and "error" in err


def test_failed_replicates_exit_code(monkeypatch, capsys):
    out = harness.ExperimentOutput([{"replicate": 0, "ok": 1}, {"replicate": 1, "ok": 0, "error": "x"}])
    monkeypatch.setattr(cli, "run_experiment", lambda cfg: out)
    code, _, err = run(["coupled"], capsys)
    assert code == 3 and "1 replicate" in err


def test_all_subcommands_parse():
    parser = cli.build_parser()
    for kind in harness.KINDS:
        assert parser.parse_args([kind]).kind == kind


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "coupled_pimh.cli", "sigma", "--T", "10", "--N", "8", "--sigma-replicates", "20"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert proc.stdout.startswith("N,sigma_hat,")
