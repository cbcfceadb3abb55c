import pathlib

import pytest

ROOT = pathlib.Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"

PARAMS = {
    "CIR": {"kappa": 2.0, "lambda": 1.0, "theta": 1.5, "x0": 2.0},
    "CEV": {"kappa": 4.0, "lambda": 0.5, "theta": 3.0, "alpha": 0.875, "x0": 2.0},
    "GLE": {"lambda": 1.0, "sigma": 4.0, "x0": 2.0},
    "AitSahalia": {"a_m1": 1.0, "a0": 1.0, "a1": 1.0, "a2": 1.0, "r": 5.0, "rho": 1.5, "sigma": 1.0, "x0": 1.0},
    "SIS": {"beta": 0.5, "M": 100.0, "mu": 20.0, "gamma": 25.0, "sigma": 0.035, "I0": 10.0},
}

ACCEPTANCE_LINES = []


@pytest.fixture
def params():
    return {k: dict(v) for k, v in PARAMS.items()}


@pytest.fixture
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
