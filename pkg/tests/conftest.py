import numpy as np
import pytest

from taskalloc import presets
from taskalloc.design import optimal_equilibrium, sample_constraints
from taskalloc.model import RateFamily


@pytest.fixture(scope="session")
def rc():
    return presets.resource_family()


@pytest.fixture(scope="session")
def hs():
    return presets.sensing_family()


@pytest.fixture(scope="session")
def w_rc():
    return np.array(presets.RESOURCE_W)


@pytest.fixture(scope="session")
def references():
    return presets.reference_matrices()


@pytest.fixture(scope="session")
def pairs(references):
    """Optimal pairs for the four reference designs, computed once."""
    return {name: optimal_equilibrium(fam, w, 1.0, cost) for name, (fam, w, cost, _) in references.items()}


@pytest.fixture(scope="session")
def design_samples(references):
    """5000 seeded constraint samples per reference design."""
    out = {}
    for name, (fam, w, _, _) in references.items():
        budget = presets.SENSING_BUDGET_FACTOR if fam.kind == "heterogeneous_sensing" else 10
        out[name] = sample_constraints(fam, w, 1.0, 5000, seed=0, budget_factor=budget)
    return out


@pytest.fixture
def scalar_rc():
    return RateFamily.resource_collection(3.5, 0.05, 1.0, m=1)


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """Record a one-line verdict for an acceptance criterion and echo it."""

    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} | {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
