import numpy as np
import pytest

from ffcrecon import AcquisitionProtocol, UnknownMaps
from ffcrecon.presets import preset_protocol


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_protocol():
    return preset_protocol("sim3field", matrix=(16, 16))


def random_maps(rng, n_e, shape, t1_range=(0.05, 0.4)):
    C = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    alpha = rng.standard_normal((n_e,) + shape) + 1j * rng.standard_normal((n_e,) + shape)
    T1 = rng.uniform(*t1_range, size=(n_e,) + shape)
    return UnknownMaps(C, alpha, T1)


def crandn(rng, shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def tiny_protocol(matrix=(2, 2), times=((0.1,),), fields=(0.2,)):
    return AcquisitionProtocol(0.2, fields, times, matrix)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
