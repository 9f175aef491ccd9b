import numpy as np
import pytest

from fedcompress.data import make_task
from fedcompress.linalg import RngStream
from fedcompress.model import ModelConfig, build


@pytest.fixture
def cfg():
    return ModelConfig()


@pytest.fixture
def base(cfg):
    return build(cfg, RngStream(7))


@pytest.fixture
def vec_task():
    return make_task("vec_classify", 120, 4, RngStream(3))


@pytest.fixture
def batch(vec_task):
    return vec_task.subset(np.arange(12))


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
