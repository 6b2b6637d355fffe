import numpy as np
import pytest
import torch

from pert.losses import VGGFeatures

ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def fx():
    return VGGFeatures.random()


@pytest.fixture(scope="session")
def fx64():
    return VGGFeatures.random().double()


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
