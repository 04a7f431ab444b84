import numpy as np
import pytest

from eoslab.dynamics import RunConfig, gd_orbit, run
from eoslab.problem import FactorisationProblem

VERDICTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[VERDICTS] = {}


@pytest.fixture(scope="session", autouse=True)
def compiled_kernels():
    """Load (or compile) the GD loops once so timed tests measure steady-state cost."""
    prob = FactorisationProblem(3, 1.0)
    run(RunConfig(prob, 0.1, theta0=[1.1, 1.0, 1.0], steps=2))
    gd_orbit(prob, 0.1, [1.1, 1.0, 1.0], 2)


@pytest.fixture
def verdict(request):
    """Record a PASS/FAIL line for an acceptance criterion and print it."""
    table = request.config.stash[VERDICTS]

    def record(number: int, title: str, ok: bool, detail: str = ""):
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
        table[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    table = config.stash.get(VERDICTS, {})
    if not table:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(table):
        terminalreporter.write_line(table[number])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(params=[(2, 1.0), (3, 1.0), (5, 1.0), (3, 2.0), (5, 0.5)], ids=lambda v: f"p{v[0]}-y{v[1]:g}")
def prob(request):
    return FactorisationProblem(*request.param)
