import json
import subprocess
import sys

import pytest

from exitlab.cli import run

from .conftest import CONFIGS

MSTAR = str(CONFIGS / "mstar.json")


def artifacts(path):
    """Byte contents of every JSON/CSV artifact, keyed by file name."""
    return {p.name: p.read_bytes() for p in sorted(path.iterdir()) if p.suffix in (".json", ".csv")}


def small_config(tmp_path, **experiment):
    cfg = json.loads((CONFIGS / "mstar.json").read_text())
    cfg["experiment"].update(experiment)
    out = tmp_path / "cfg.json"
    out.write_text(json.dumps(cfg))
    return str(out)


def test_validate_ok(tmp_path):
    assert run(["validate", "--config", MSTAR, "--out", str(tmp_path), "--seed", "1"]) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["validation"]["ok"] is True and rep["seed"] == 1
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["manifest_hash"] == rep["manifest_hash"]


def test_verify_symmetric_is_degenerate(tmp_path):
    assert run(["verify", "--config", str(CONFIGS / "symmetric.json"), "--out", str(tmp_path), "--seed", "1"]) == 0
    assert json.loads((tmp_path / "report.json").read_text())["verdict"] == "degenerate"


def test_zero_trials_is_invalid(tmp_path, capsys):
    assert run(["simulate", "--config", MSTAR, "--out", str(tmp_path), "--seed", "1", "--trials", "0"]) == 2
    assert "trials must be >= 1" in capsys.readouterr().err


@pytest.mark.parametrize("extra", [["--eps", "-1"], ["--dt", "0"], ["--grid-h", "0"], ["--delta", "-1"]])
def test_bad_flags_are_invalid(tmp_path, extra):
    assert run(["pde", "--config", MSTAR, "--out", str(tmp_path), "--seed", "1"] + extra) == 2


def test_bad_config_is_invalid(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"model": {"d": 1, "n": 1, "modes": [{"drift": ["-x9"]}]}, '
                   '"domain": {"kind": "interval", "params": {"lo": -1, "hi": 1}}}')
    assert run(["validate", "--config", str(bad), "--out", str(tmp_path / "o"), "--seed", "1"]) == 2
    assert "model.modes[0].drift[0]" in capsys.readouterr().err
    assert run(["validate", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path), "--seed", "1"]) == 2


def test_numerical_failure_exit_code(tmp_path, capsys):
    # a start point that is not an equilibrium makes the quasipotential undefined
    cfg = small_config(tmp_path, x0=[0.5])
    assert run(["quasipotential", "--config", cfg, "--out", str(tmp_path / "o"), "--seed", "1"]) == 3
    assert "numerical failure" in capsys.readouterr().err


def test_unknown_command_exits_2(tmp_path):
    with pytest.raises(SystemExit) as info:
        run(["explode", "--config", MSTAR, "--out", str(tmp_path)])
    assert info.value.code == 2


def test_simulate_reproducible_across_workers(tmp_path):
    base = ["simulate", "--config", MSTAR, "--seed", "5", "--trials", "600", "--eps", "0.3"]
    assert run(base + ["--out", str(tmp_path / "a"), "--workers", "1"]) == 0
    assert run(base + ["--out", str(tmp_path / "b"), "--workers", "3"]) == 0
    a, b = artifacts(tmp_path / "a"), artifacts(tmp_path / "b")
    assert a == b and {"report.json", "survival.csv", "histogram.csv", "path.csv"} <= set(a)
    for name, body in a.items():
        text = body.decode()
        assert "manifest_hash" in text and ("seed" in text)
    svg_a = (tmp_path / "a" / "survival.svg").read_text()
    assert svg_a.startswith("<svg") and svg_a.count("<polyline") == 1


def test_seed_changes_results(tmp_path):
    base = ["simulate", "--config", MSTAR, "--trials", "300", "--eps", "0.3"]
    run(base + ["--seed", "1", "--out", str(tmp_path / "a")])
    run(base + ["--seed", "2", "--out", str(tmp_path / "b")])
    assert artifacts(tmp_path / "a")["survival.csv"] != artifacts(tmp_path / "b")["survival.csv"]


def test_single_rung_ladder_has_no_trend(tmp_path):
    cfg = small_config(tmp_path, ladder=[0.3], trials=300, y0=[1.0], horizon=60.0)
    assert run(["ladder", "--config", cfg, "--out", str(tmp_path / "o"), "--seed", "1"]) == 0
    rep = json.loads((tmp_path / "o" / "report.json").read_text())
    assert len(rep["rows"]) == 1 and rep["verdicts"]["trend"] is None
    lines = (tmp_path / "o" / "ladder.csv").read_text().splitlines()
    assert lines[0].startswith("# manifest_hash=") and len(lines) == 3


def test_infinite_delta_concentration_is_exit_fraction(tmp_path):
    cfg = small_config(tmp_path, ladder=[0.5, 0.3], trials=300, y0=[1.0], horizon=5.0)
    assert run(["ladder", "--config", cfg, "--out", str(tmp_path / "o"), "--seed", "1", "--delta", "inf"]) == 0
    rows = json.loads((tmp_path / "o" / "report.json").read_text())["rows"]
    assert all(r["concentration"] == r["exit_fraction"] for r in rows)


@pytest.mark.parametrize("command", ["action", "pde", "eigen"])
def test_other_commands_run(tmp_path, command):
    assert run([command, "--config", MSTAR, "--out", str(tmp_path), "--seed", "1", "--grid-h", "0.015625"]) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["command"] == command


def test_eigen_policy_iteration(tmp_path):
    assert run(["eigen", "--config", str(CONFIGS / "policy.json"), "--out", str(tmp_path), "--seed", "1"]) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert (tmp_path / "policy_mode1.csv").exists()
    assert "policy" in json.dumps(rep)


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "exitlab.cli", "validate", "--config", MSTAR,
                           "--out", str(tmp_path), "--seed", "3"], capture_output=True, text=True)
    assert proc.returncode == 0
