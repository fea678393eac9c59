import json
from pathlib import Path

import numpy as np
import pytest

from exitlab import load_problem

CONFIGS = Path(__file__).resolve().parents[1] / "src" / "exitlab" / "configs"

# acceptance lines collected by test_acceptance.py and printed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def one_d(drifts, rates=None, scaling="unit", lo=-1.0, hi=1.0, g=None, sigma="1", controls=None):
    """Problem on an interval with constant diffusion, built from drift strings."""
    model = {"d": 1, "n": len(drifts), "rate_scaling": scaling,
             "modes": [{"drift": [f], "sigma": {"kind": "constant", "entries": sigma}} for f in drifts]}
    if rates is not None:
        model["rates"] = rates
    cfg = {"model": model, "domain": {"kind": "interval", "params": {"lo": lo, "hi": hi}}}
    if g is not None:
        cfg["boundary"] = {"g": g}
    if controls is not None:
        cfg["controls"] = controls
    return load_problem(cfg)


def mstar(scaling="inverse_eps"):
    cfg = json.loads((CONFIGS / "mstar.json").read_text())
    cfg["model"]["rate_scaling"] = scaling
    return load_problem(cfg)


@pytest.fixture(scope="session")
def mstar_problem():
    return mstar()


@pytest.fixture
def rng():
    return np.random.default_rng(20261015)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
