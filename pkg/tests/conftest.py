import functools

import numpy as np
import pytest

from dissipa.analysis import analyze
from dissipa.cli import load_config
from dissipa.model import DynamicsModel

ACCEPTANCE_LINES = []


@functools.lru_cache(maxsize=None)
def solve_config(name, divisions=None):
    """Analyse a bundled configuration once per test session."""
    cfg = load_config(name)
    return cfg, analyze(cfg.request(divisions))


def conic_model(k1=1.0, k2=2.0, B=1.0, C=1.0, D=0.0):
    return DynamicsModel.from_strings(1, 1, 1, [f"{k1}*x1^3 - {k1 + k2}*x1"], [f"{C}*x1"], B=[[B]], D=[[D]],
                                      name="conic")


def pendulum_model():
    return DynamicsModel.from_strings(2, 1, 1, ["x2", "-sin(x1) - x2"], ["x2"], B=[[0.0], [1.0]], name="pendulum")


def poly3d_model():
    return DynamicsModel.from_strings(3, 1, 1, ["-x1 - x3 + x2 - x3*x2^2", "-x2*x3^2 - x2", "0.5*(x1 - x3)"],
                                      ["x2"], B=[[0.0], [1.0], [0.0]], name="poly3d")


@pytest.fixture(scope="session")
def conic():
    return conic_model()


@pytest.fixture(scope="session")
def pendulum():
    return pendulum_model()


@pytest.fixture(scope="session")
def poly3d():
    return poly3d_model()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
