import numpy as np
import pytest

from messpy.model_core import DisturbanceScheme, make_design, rng_for, simulate
from messpy.weights import build_knn

ACCEPTANCE = []


def record(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE.append((criterion, passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for c, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"CRITERION {c:2d} {'PASS' if ok else 'FAIL'}  {detail}")


def knn_pair(n, seed=0, kw=4, km=7):
    coords = rng_for(seed, n, 5).uniform(size=(n, 2))
    return build_knn(coords, kw), build_knn(coords, km)


@pytest.fixture(scope="session")
def small_design():
    """n = 80 kNN design with an intercept; W and M do not commute."""
    W, M = knn_pair(80, seed=1)
    X = np.column_stack([np.ones(80), make_design(80, 1)])
    return W, M, X


@pytest.fixture(scope="session")
def small_data(small_design):
    W, M, X = small_design
    return simulate(W, M, X, [0.5, 1.0, 1.0], 0.4, 0.3, DisturbanceScheme(), seed=1, rep=0)
