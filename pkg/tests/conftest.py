import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_cores(rng, dims, ranks, scale=1.0):
    return [scale * rng.standard_normal((ranks[d], ranks[d + 1], dims[d])) for d in range(len(dims))]


ACCEPTANCE_LINES = []


def record_criterion(number, passed, detail):
    line = f"CRITERION {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
