import os

# the thread pool size is fixed at numba import; 8 lets tests compare 1 vs 8 workers
os.environ.setdefault("NUMBA_NUM_THREADS", "8")

import pytest  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    import numpy as np

    return np.random.default_rng(20240611)
