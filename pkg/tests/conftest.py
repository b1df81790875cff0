import numpy as np
import pytest

from ffo import SolverConfig, random_qp, solve_lower

TIGHT = SolverConfig(tol=1e-10)
ACCEPTANCE_LINES = []


def suite_instances(n=50, draw_seed=2024):
    """Random strictly complementary QPs shared by the oracle suites.

    Yields ``(problem, x, c, sol)`` with d <= 10, m <= 6.
    """
    rng = np.random.default_rng(draw_seed)
    for seed in range(n):
        d = int(rng.integers(3, 11))
        m = int(rng.integers(1, 7))
        p = int(rng.integers(0, min(3, d - 1) + 1))
        nx = int(rng.integers(1, 5))
        pb = random_qp(seed=seed, d=d, m=m, p=p, dim_x=nx)
        x = pb.x_default
        c = np.random.default_rng(seed).standard_normal(d)
        yield pb, x, c, solve_lower(pb, x, TIGHT)


@pytest.fixture(scope="session")
def suite():
    return list(suite_instances())


def record(criterion, passed, detail):
    line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
