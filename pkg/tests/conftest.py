import numpy as np
import pytest

from evtrack.event_io import EventWindow, make_events

ACCEPTANCE_LINES: list[str] = []


def random_events(rng, n, sensor=(346, 260), t0=0, t1=50_000):
    t = np.sort(rng.integers(t0, t1, n)).astype(np.uint64)
    return make_events(t, rng.integers(0, sensor[0], n), rng.integers(0, sensor[1], n),
                       rng.choice(np.array([-1, 1], dtype=np.int8), n))


def random_window(rng, n, sensor=(346, 260), t0=0, t1=50_000):
    return EventWindow(random_events(rng, n, sensor, t0, t1), t0, t1, *sensor)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
