import math

import numpy as np
import pytest

from phlab.map_registry import example3_map, example4_map, map_a, map_b

SQRT5 = math.sqrt(5.0)
LAM_U_B = (5 + SQRT5) / 2
LAM_C_B = (5 - SQRT5) / 2
SLOPE_U_B = (SQRT5 - 1) / 2
SLOPE_C_B = -(1 + SQRT5) / 2


@pytest.fixture(scope="session")
def f_a():
    return map_a()


@pytest.fixture(scope="session")
def f_b():
    return map_b()


@pytest.fixture(scope="session")
def ex3():
    return example3_map()


@pytest.fixture(scope="session")
def ex4():
    return example4_map()


def eigen_oracle(matrix):
    """Unstable and centre eigen-slopes from numpy's eigen solver."""
    m = np.array(matrix, dtype=float).reshape(2, 2)
    vals, vecs = np.linalg.eig(m)
    order = np.argsort(-np.abs(vals))
    vu, vc = vecs[:, order[0]], vecs[:, order[1]]
    with np.errstate(divide="ignore"):
        return vu[1] / vu[0], vc[1] / vc[0], abs(vals[order[0]]), abs(vals[order[1]])


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
