import json
import subprocess
import sys

import numpy as np
import pytest

from taskalloc.cli import (
    EXIT_CONFIG,
    EXIT_INFEASIBLE,
    EXIT_OK,
    EXIT_UNSTABLE,
    EXIT_VERIFY_FAIL,
    main,
    resolve_config,
)
from taskalloc.errors import ConfigurationError

BASE = {
    "family": {"kind": "resource_collection", "m": 4, "R": 3.5, "alpha": 0.05, "beta": 1.0},
    "w": [0.05, 0.25, 1.0, 2.0],
    "cost": "max_norm",
    "G": "identity",
    "design": {"n_starts": 4},
    "sampler": {"count": 300, "seed": 1},
    "simulation": {"T": 1.0, "stride": 100},
    "agents": {"N": 100, "seeds": [0, 1], "T": 1.0},
}


def _run(tmp_path, command, cfg, name="out", extra=()):
    path = tmp_path / f"{name}.json"
    path.write_text(json.dumps(cfg))
    out = tmp_path / name
    return main([command, "--config", str(path), "--out", str(out), *extra]), out


def _with(**changes):
    cfg = json.loads(json.dumps(BASE))
    cfg.update(changes)
    return cfg


def test_design_writes_reports(tmp_path):
    code, out = _run(tmp_path, "design", BASE)
    assert code == EXIT_OK
    report = json.loads((out / "design_report.json").read_text())
    assert report["passed"] and report["margin"] > 0
    assert report["supplied_G_verification"]["passed"]
    eq = json.loads((out / "equilibrium.json").read_text())
    assert np.allclose(eq["q"], 20 * np.log(34), rtol=1e-9)
    resolved = json.loads((out / "resolved_config.json").read_text())
    assert resolved["simulation"]["dt"] == 1e-3 and resolved["output"] == str(out)


def test_reruns_are_byte_identical(tmp_path):
    _, a = _run(tmp_path, "design", BASE, "a")
    _, b = _run(tmp_path, "design", BASE, "b")
    assert (a / "design_report.json").read_bytes() == (b / "design_report.json").read_bytes()
    assert (a / "equilibrium.json").read_bytes() == (b / "equilibrium.json").read_bytes()


def test_degenerate_growth(tmp_path):
    code, out = _run(tmp_path, "design", _with(w=[0, 0, 0, 0]))
    assert code == EXIT_OK
    report = json.loads((out / "design_report.json").read_text())
    assert report["degenerate"] and report["cost_optimal"] == 0.0
    assert json.loads((out / "equilibrium.json").read_text())["q"] == [0.0] * 4


def test_config_errors(tmp_path):
    assert _run(tmp_path, "design", _with(colour="red"))[0] == EXIT_CONFIG
    assert _run(tmp_path, "design", _with(w=[0.1, 0.2]))[0] == EXIT_CONFIG
    assert _run(tmp_path, "verify", _with(G=[[1, 0], [0, 1]]))[0] == EXIT_CONFIG
    missing = tmp_path / "missing.json"
    assert main(["design", "--config", str(missing)]) == EXIT_CONFIG
    with pytest.raises(ConfigurationError, match="simulation"):
        resolve_config(_with(simulation={"T": -1}))


def test_infeasible_growth(tmp_path):
    assert _run(tmp_path, "design", _with(w=[2.0, 2.0, 2.0, 2.0]))[0] == EXIT_INFEASIBLE


def test_verify_exit_codes(tmp_path):
    assert _run(tmp_path, "verify", BASE, "good")[0] == EXIT_OK
    flipped = tmp_path / "flipped.json"
    flipped.write_text(json.dumps((-np.eye(4)).tolist()))
    code, out = _run(tmp_path, "verify", BASE, "bad", ["--matrix", str(flipped)])
    assert code == EXIT_VERIFY_FAIL
    report = json.loads((out / "verification_report.json").read_text())
    assert report["verdicts"]["b"] is False and report["violation_counts"]["b"] > 0


def test_simulate_outputs(tmp_path):
    code, out = _run(tmp_path, "simulate", BASE)
    assert code == EXIT_OK
    header = (out / "trajectory.csv").read_bytes().split(b"\r\n")[0]
    assert header == b"t,q_1,q_2,q_3,q_4,x_1,x_2,x_3,x_4,p_1,p_2,p_3,p_4,S,L"
    summary = json.loads((out / "summary.json").read_text())
    assert summary["terminal_time"] == pytest.approx(1.0)
    assert summary["lyapunov_monitor"]["passed"]


def test_simulate_instability(tmp_path):
    cfg = _with(simulation={"T": 50.0, "dt": 5.0, "stride": 1, "x0": "uniform"})
    assert _run(tmp_path, "simulate", cfg)[0] == EXIT_UNSTABLE


def test_agents_and_seed_override(tmp_path):
    code, out = _run(tmp_path, "agents", BASE, extra=["--seed", "7"])
    assert code == EXIT_OK
    summary = json.loads((out / "deviation_summary.json").read_text())
    assert [r["seed"] for r in summary["per_seed"]] == [7]
    assert (out / "agents_seed7.csv").exists() and (out / "ode.csv").exists()
    assert json.loads((out / "resolved_config.json").read_text())["sampler"]["seed"] == 7


def test_module_entry_point(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(_with(extra=1)))
    proc = subprocess.run([sys.executable, "-m", "taskalloc.cli", "design", "--config", str(path)],
                          capture_output=True, text=True)
    assert proc.returncode == EXIT_CONFIG
    assert "configuration error" in proc.stderr


def test_water_family_design(tmp_path):
    cfg = _with(family={"kind": "water_distribution", "max_levels": [2.0, 5.0, 1.0]}, w=[0.3, 0.6, 0.2], G="design")
    code, out = _run(tmp_path, "design", cfg)
    assert code == EXIT_OK
    report = json.loads((out / "design_report.json").read_text())
    assert report["structure"] == "diagonal" and report["passed"]
