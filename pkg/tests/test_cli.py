import argparse
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from sidemc.cli import (EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, MANIFEST, main, read_manifest, read_solution_csv,
                        resolve_overrides, run_command, solution_csv)
from sidemc.config import parse_config
from sidemc.errors import ConfigurationError
from sidemc.solver import estimate_solution

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def test_transport_solve(tmp_path):
    code = main(["solve", "--config", str(CONFIGS / "transport.cfg"), "--out", str(tmp_path)])
    assert code == EXIT_OK
    pts, u, se, seg = read_solution_csv(tmp_path / "solution.csv")
    assert pts.shape == (101, 1)
    np.testing.assert_array_equal(se, 0.0)
    assert np.max(np.abs(u[:, 0] - np.sin(pts[:, 0] + 1))) <= 1e-3
    records = read_manifest(tmp_path / MANIFEST)
    assert records[0]["record"] == "run" and records[-1]["status"] == "ok"
    sol = next(r for r in records if r["record"] == "solution")
    assert sol["norm_report"]["available"]


def test_solution_csv_round_trip_is_exact(tmp_path):
    doc = parse_config((CONFIGS / "transport.cfg").read_text())
    sol = estimate_solution(doc.spec, 1.0, doc.run.points[::10], M_inner=1, n_steps=37)
    (tmp_path / "s.csv").write_text(solution_csv(sol))
    pts, u, se, _ = read_solution_csv(tmp_path / "s.csv")
    np.testing.assert_array_equal(pts, sol.points)
    np.testing.assert_array_equal(u, sol.estimate)
    np.testing.assert_array_equal(se, sol.stderr)


def test_replay_is_bit_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["solve", "--config", str(CONFIGS / "poisson.cfg"), "--out", str(a), "--seed", "3"]) == EXIT_OK
    assert main(["replay", "--manifest", str(a / MANIFEST), "--out", str(b)]) == EXIT_OK
    assert (a / "solution.csv").read_bytes() == (b / "solution.csv").read_bytes()


def test_override_precedence():
    args = argparse.Namespace(seed=None, inner=None, steps=None, threads=None)
    env = {"SIDEMC_SEED": "5", "SIDEMC_THREADS": "2"}
    assert resolve_overrides(args, env) == {"seed": 5, "threads": 2}
    args.seed = 9
    assert resolve_overrides(args, env)["seed"] == 9
    with pytest.raises(ConfigurationError):
        resolve_overrides(argparse.Namespace(), {"SIDEMC_SEED": "x"})


def test_config_error_exit_code_and_manifest(tmp_path):
    code = run_command("solve", "[coefficients]\nsigma1 = \"t+\"\n", tmp_path)
    assert code == EXIT_CONFIG
    rec = read_manifest(tmp_path / MANIFEST)
    issues = next(r for r in rec if r["record"] == "issues")["issues"]
    assert (issues[0]["line"], issues[0]["column"]) == (2, 12)
    assert rec[-1]["status"] == "config_error"


def test_numerical_error_exit_code(tmp_path):
    code = run_command("solve", "[coefficients]\nphi = \"1/(x1-x1)\"\n[run]\ninner = 1\nsteps = 2\n", tmp_path)
    assert code == EXIT_NUMERIC
    assert read_manifest(tmp_path / MANIFEST)[-1]["status"] == "numerical_error"


def test_missing_config_still_writes_manifest(tmp_path):
    code = main(["solve", "--config", str(tmp_path / "absent.cfg"), "--out", str(tmp_path / "o")])
    assert code == EXIT_CONFIG
    assert read_manifest(tmp_path / "o" / MANIFEST)[-1]["status"] == "config_error"


def test_audit_of_minimal_problem(tmp_path):
    assert run_command("audit", "[problem]\nT = 1.0\n", tmp_path) == EXIT_OK
    assert (tmp_path / "audit.csv").read_text().startswith("clause,quantity,value,bound,status,note")


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "sidemc", "solve", "--config", str(CONFIGS / "transport.cfg"),
                           "--out", str(tmp_path), "--steps", "10"], capture_output=True, text=True)
    assert proc.returncode == 0
    params = next(r for r in read_manifest(tmp_path / MANIFEST) if r["record"] == "params")
    assert params["steps"] == 10
