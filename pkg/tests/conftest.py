import numpy as np
import pytest

from solerwave.core import RadialGrid, SolerModel
from solerwave.fgr import coupling_vectors
from solerwave.linop import assemble_linearized, discrete_spectrum
from solerwave.profile import polish_profile, solve_profile


@pytest.fixture(scope="session")
def model():
    return SolerModel()


@pytest.fixture(scope="session")
def profile09(model):
    return solve_profile(model, 0.9)


@pytest.fixture(scope="session")
def grid400():
    return RadialGrid(400, 40.0)


@pytest.fixture(scope="session")
def grid200():
    return RadialGrid(200, 20.0)


@pytest.fixture(scope="session")
def disc09(profile09, model, grid400):
    return polish_profile(profile09, model, grid400)


@pytest.fixture(scope="session")
def op09(disc09, model):
    return assemble_linearized(disc09, model)


@pytest.fixture(scope="session")
def spec09(op09):
    return discrete_spectrum(op09)


@pytest.fixture(scope="session")
def small09(profile09, model, grid200):
    """(discrete wave, operator, spectrum) on the coarse 200-cell box of radius 20."""
    disc = polish_profile(profile09, model, grid200)
    L = assemble_linearized(disc, model)
    return disc, L, discrete_spectrum(L)


@pytest.fixture(scope="session")
def couplings09(disc09, model, spec09):
    return coupling_vectors(disc09, model, spec09)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion, with the measured numbers."""
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if rep.when != "call" or "test_acceptance.py" not in rep.nodeid:
                continue
            props = dict(rep.user_properties)
            if "criterion" not in props:
                continue
            lines.append((props["criterion"], "PASS" if outcome == "passed" else "FAIL", props.get("detail", "")))
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for number, status, detail in sorted(lines):
        terminalreporter.write_line(f"criterion {number:>2}: {status}  {detail}")
