from __future__ import annotations

import numpy as np
import pytest

from bplnlc.synth import SynthSpec, example_truth, simulate_dataset


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running statistical checks")
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the summary")


@pytest.fixture
def small_problem():
    """Synthetic (n, M, N) = (2, 4, 8) dataset with its generating state."""
    rng = np.random.default_rng(11)
    truth = example_truth(4, 8, 2, rng, phi_pop=[(0.0, 0.0), (1.0, -0.1)])
    ds, tr = simulate_dataset(SynthSpec(M=4, N=8, n=2, truth=truth, seed=5, exposure=5000.0))
    return ds, tr


# -- acceptance reporting: one PASS/FAIL/SKIP line per criterion -------------

_CRITERIA: dict[str, str] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    name = mark.args[0]
    if rep.skipped:
        _CRITERIA[name] = "SKIP"
    elif rep.failed:
        _CRITERIA[name] = "FAIL"
    elif rep.when == "call":
        _CRITERIA.setdefault(name, "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, verdict in _CRITERIA.items():
        terminalreporter.write_line(f"{verdict}  {name}")
