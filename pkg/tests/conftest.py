import numpy as np
import pytest
import torch

from facerecon.morphable_model import synthesize_toy_model

_ACCEPTANCE_LINES = []


def record_acceptance(line):
    _ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def toy_model():
    return synthesize_toy_model(seed=0, n_vertices=300)


@pytest.fixture(scope="session")
def small_model():
    return synthesize_toy_model(seed=3, n_vertices=12)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
