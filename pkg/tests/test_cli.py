import csv
import io
from pathlib import Path

import pytest

from dfmopt.cli import DFN_CSV_HEADER, main
from dfmopt.postprocess import CSV_HEADER, read_convergence_csv

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def _run(*argv):
    out = io.StringIO()
    code = main(list(argv), out=out)
    return code, out.getvalue()


def test_solve_from_config(tmp_path):
    code, text = _run("solve", "--config", str(CONFIGS / "problem2.ini"), "--out", str(tmp_path))
    assert code == 0
    assert "unknowns n_h" in text and "iterations" in text
    assert {p.name for p in tmp_path.iterdir()} == {"matrix.vtk", "fracture_0.vtk", "convergence.csv"}
    rows = read_convergence_csv(tmp_path / "convergence.csv")
    assert len(rows) == 1 and rows[0].errL2_D < 0.01


def test_solve_not_converged_exits_one(tmp_path):
    text = (CONFIGS / "problem2.ini").read_text().replace("tol = 1e-10", "tol = 1e-14\nmax_iter = 1")
    cfg = tmp_path / "short.ini"
    cfg.write_text(text)
    code, _ = _run("solve", "--config", str(cfg), "--out", str(tmp_path / "o"))
    assert code == 1


def test_input_errors_exit_two(tmp_path, capsys):
    assert _run("solve", "--config", str(tmp_path / "absent.ini"))[0] == 2
    assert "config file not found" in capsys.readouterr().err
    bad = tmp_path / "bad.ini"
    bad.write_text("[domain]\nbox_min = 0 0\n")
    assert _run("solve", "--config", str(bad))[0] == 2
    assert "line 2: [domain] box_min" in capsys.readouterr().err
    assert _run("converge", "--problem", "3")[0] == 2
    assert _run("converge", "--problem", "2", "--levels", "0")[0] == 2
    assert _run("dfn", "--delta0", "-1")[0] == 2
    assert _run("frobnicate")[0] == 2
    assert _run()[0] == 2


def test_help_exits_zero(capsys):
    assert _run("--help")[0] == 0
    assert "solve" in capsys.readouterr().out


def test_converge_writes_rows_and_is_reproducible(tmp_path):
    code, text = _run("converge", "--problem", "2", "--levels", "3", "--out", str(tmp_path / "a"))
    assert code == 0
    path = tmp_path / "a" / "convergence_problem2.csv"
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(CSV_HEADER) and len(lines) == 4
    assert "slopes errL2_D" in text
    _run("converge", "--problem", "2", "--levels", "3", "--out", str(tmp_path / "b"))
    assert (tmp_path / "b" / "convergence_problem2.csv").read_bytes() == path.read_bytes()


def test_converge_two_levels_skips_slopes(tmp_path):
    code, text = _run("converge", "--problem", "1", "--levels", "2", "--delta0", "0.5", "--out", str(tmp_path))
    assert code == 0 and "slopes need at least 3 levels" in text


def test_dfn_command(tmp_path):
    code, text = _run("dfn", "--seed", "2", "--fractures", "5", "--levels", "1", "--delta0", "0.5", "--out", str(tmp_path))
    assert code == 0
    assert "5 fractures" in text
    with open(tmp_path / "dfn.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == DFN_CSV_HEADER
    assert len(rows) == 2
    rec = dict(zip(rows[0], rows[1]))
    assert rec["variant"] == "coupled" and rec["converged"] == "1"
    assert int(rec["n_total"]) == int(rec["n_h"]) + int(rec["n_q"]) + int(rec["n_u"])


def test_check_command():
    code, text = _run("check")
    assert code == 0
    lines = text.strip().splitlines()
    assert lines[-1].endswith("checks passed")
    passed, total = lines[-1].split()[0].split("/")
    assert passed == total


@pytest.mark.parametrize("argv", [["solve"], ["dfn", "--fractures", "x"]])
def test_argument_errors(argv):
    assert _run(*argv)[0] == 2
