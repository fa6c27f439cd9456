import numpy as np
import pytest

from litho_smo.cli import EXIT_GRADCHECK, EXIT_INVALID, EXIT_NUMERIC, EXIT_OK, main
from litho_smo.harness import read_csv

SMALL = ["--set", "n_mask=32", "--set", "pixel_nm=16", "--set", "n_source=5"]


def test_simulate(tmp_path, capsys):
    assert main(["simulate", "suite:contact_array", "--out", str(tmp_path), *SMALL]) == EXIT_OK
    assert "L2" in capsys.readouterr().out
    assert (tmp_path / "resist_nominal.pgm").is_file()


def test_optimize_with_config_file(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("n_mask = 32\npixel_nm = 16\nn_source = 5\nmax_outer_iters = 4  # short\n")
    out = tmp_path / "run"
    assert main(["optimize", "suite:t_junction", "--method", "cg", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    row = read_csv(out / "summary.csv")[0]
    assert row["method"] == "CG" and int(row["iters"]) <= 4 and row["error"] == ""


def test_optimize_numeric_failure(tmp_path):
    code = main(["optimize", "suite:mixed", "--out", str(tmp_path), *SMALL, "--set", "max_outer_iters=5", "--set", "lr_outer=1e308"])
    assert code == EXIT_NUMERIC
    assert read_csv(tmp_path / "summary.csv")[0]["error"]


@pytest.mark.parametrize("argv", [
    ["optimize", "suite:mixed", "--out", "x", "--set", "warp=9"],
    ["optimize", "suite:mixed", "--out", "x", "--set", "n_source=4"],
    ["optimize", "no_such_file.rects", "--out", "x"],
    ["gradcheck", "suite:mixed", "--set", "n_mask=128"],
    ["simulate", "suite:mixed", "--set", "novalue"],
])
def test_invalid_input_exit_code(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == EXIT_INVALID


def test_gradcheck_exit_codes(capsys):
    assert main(["gradcheck"]) == EXIT_OK
    assert "PASS" in capsys.readouterr().out
    assert main(["gradcheck", "--corrupt-gradient"]) == EXIT_GRADCHECK
    assert main(["gradcheck", "--fixture", "quadratic"]) == EXIT_OK
    assert main(["gradcheck", "--fixture", "quadratic", "--corrupt-gradient"]) == EXIT_GRADCHECK


def test_benchmark_command(tmp_path, capsys):
    code = main(["benchmark", "suite:l_shape", "--methods", "MO,FD", "--out", str(tmp_path), *SMALL, "--set", "max_outer_iters=3"])
    assert code == EXIT_OK
    table = read_csv(tmp_path / "benchmark_methods.csv")
    assert {r["method"] for r in table} == {"MO", "FD"}
    assert len(read_csv(tmp_path / "benchmark_runs.csv")) == 2
    assert (tmp_path / "l_shape_FD" / "summary.csv").is_file()


def test_benchmark_imaging_only(tmp_path):
    code = main(["benchmark", "suite:mixed", "--skip-runs", "--imaging", "--out", str(tmp_path), *SMALL])
    assert code == EXIT_OK
    rows = read_csv(tmp_path / "imaging_timing.csv")
    assert [int(r["parallel_width"]) for r in rows] == [1, int(rows[0]["active_points"])]
