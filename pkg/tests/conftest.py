"""Shared fixtures: seeded desk-scale training runs reused by several test modules."""

import time

import pytest

from parampde.problem import ProblemSpec
from parampde.training import TrainConfig, train

ACCEPTANCE_LINES: dict[int, str] = {}

DESK_D1 = TrainConfig(N=2000, depth=4, width=40, max_epochs=300, seed=0, validation_points=2000)
DESK_D2 = TrainConfig(N=2000, depth=4, width=40, max_epochs=120, seed=0, validation_points=1000)


def _run(spec, cfg):
    start = time.perf_counter()
    model, report = train(spec, cfg)
    return model, report, time.perf_counter() - start


@pytest.fixture(scope="session")
def desk_d1():
    """(model, report, seconds) of the seeded d=1 desk run."""
    return _run(ProblemSpec(d=1), DESK_D1)


@pytest.fixture(scope="session")
def desk_d2():
    return _run(ProblemSpec(d=2), DESK_D2)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
