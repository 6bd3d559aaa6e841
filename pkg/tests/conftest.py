import numpy as np
import pytest

from rta_docking import kernels
from rta_docking.controllers import lqr_weights, solve_lqr
from rta_docking.dynamics import CwParameters, cw_matrices
from rta_docking.filters import FilterDeps
from rta_docking.nmt import NmtGridSpec, build_library
from rta_docking.safety import SafetyParameters
from rta_docking.sim import build_scenario, default_config, run_scenario

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def params():
    return CwParameters()


@pytest.fixture(scope="session")
def sp():
    return SafetyParameters()


@pytest.fixture(scope="session")
def AB(params):
    return cw_matrices(params)


@pytest.fixture(scope="session")
def library(params, sp):
    return build_library(NmtGridSpec(), sp, params)


@pytest.fixture(scope="session")
def scenario():
    return build_scenario(default_config())


@pytest.fixture(scope="session")
def backup_gains(scenario):
    return scenario.deps.backup_gains


@pytest.fixture(scope="session")
def primary_gains(scenario):
    return scenario.primary


@pytest.fixture(scope="session")
def deps(scenario):
    return scenario.deps


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    return request.param


@pytest.fixture(scope="session")
def default_runs(scenario):
    """Default scenario under every filter, run once per session."""
    cache = {}

    def get(kind):
        if kind not in cache:
            cache[kind] = run_scenario(default_config().replace(filter=kind), scenario)
        return cache[kind]

    return get


def record_acceptance(number, name, passed, detail):
    line = f"CRITERION {number} [{'PASS' if passed else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
