import numpy as np
import pytest

from cqlflow import envs
from cqlflow.mdp_env import generate_dataset


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(1e-6, np.max(np.abs(a)), np.max(np.abs(b))))


def numeric_grad(f, x, h=1e-6):
    """Central differences of scalar f with respect to every entry of array x (in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


@pytest.fixture(scope="session")
def grid():
    return envs.make_mdp("distractor-grid-0")


@pytest.fixture(scope="session")
def small_data(grid):
    return generate_dataset(grid, envs.make_behavior(grid), 20, 1000)


ACCEPTANCE_LINES = []


def report(criterion, ok, detail):
    """Record one acceptance line; shown with -s and in the terminal summary."""
    line = f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
