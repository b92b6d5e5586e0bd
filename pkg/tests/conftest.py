import numpy as np
import pytest


@pytest.fixture
def tiny_batch():
    rng = np.random.default_rng(42)
    ids = rng.integers(2, 20, size=(2, 5))
    target = ids.copy()
    target[0, 1] = (ids[0, 1] + 3) % 18 + 2
    target[1, 3] = (ids[1, 3] + 5) % 18 + 2
    det = (ids != target).astype(int)
    mask = np.array([[1, 1, 1, 1, 1], [1, 1, 1, 1, 0]], dtype=bool)
    return ids, mask, det, target


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
