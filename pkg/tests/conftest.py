import re

import numpy as np
import pytest

from gravistab.equilibria import King, Polytrope, build_equilibrium

_CRITERIA = {
    1: "equilibrium self-consistency",
    2: "Lane-Emden closed form at n = 7/2",
    3: "uniform-ball Poisson oracle",
    4: "interpolation inequality",
    5: "Antonov coercivity",
    6: "kernel suite",
    7: "rearrangement suite",
    8: "conservation in evolution",
    9: "orbital stability demonstration",
    10: "linearized free-energy conservation",
}
_RESULTS: dict = {}
_PATTERN = re.compile(r"test_criterion_(\d+)_")


@pytest.fixture(scope="session")
def king():
    return build_equilibrium(King(), 1.0)


@pytest.fixture(scope="session")
def poly1():
    return build_equilibrium(Polytrope(1.0), 1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_runtest_logreport(report):
    m = _PATTERN.search(report.nodeid)
    if m is None:
        return
    if report.when == "call" or report.failed or report.skipped:
        n = int(m.group(1))
        ok, details = _RESULTS.get(n, (True, []))
        details = details + [v for k, v in report.user_properties if k == "detail"]
        _RESULTS[n] = (ok and report.passed, details)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in _CRITERIA.items():
        if n not in _RESULTS:
            terminalreporter.write_line(f"criterion {n:2d} NOT RUN  {title}")
            continue
        ok, details = _RESULTS[n]
        line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}"
        if details:
            line += ": " + "; ".join(details)
        terminalreporter.write_line(line)
