"""Shared fixtures: the a0 = 5, v = 10 v0 honeycomb setup with micro cutoff 12."""
import numpy as np
import pytest

from twoscale.fourier import PlaneWaveBasis, honeycomb_potential
from twoscale.lattice import build_lattice
from twoscale.microsolver import detect_dirac
from twoscale.perturbation import build_family

A0 = 5.0
AMPLITUDE = 10.0
MICRO_CUTOFF = 12


@pytest.fixture(scope="session")
def lattice():
    return build_lattice(A0)


@pytest.fixture(scope="session")
def v_micro(lattice):
    return honeycomb_potential(PlaneWaveBasis(lattice, 1), AMPLITUDE)


@pytest.fixture(scope="session")
def micro_basis(lattice):
    return PlaneWaveBasis(lattice, MICRO_CUTOFF)


@pytest.fixture(scope="session")
def dirac(v_micro, lattice, micro_basis):
    return detect_dirac(v_micro, lattice, micro_basis)


@pytest.fixture(scope="session")
def families(dirac):
    """Lazily built families keyed by tag; building F2 takes a few seconds."""
    store = {}

    def get(kind, direction=None, n=None):
        key = (kind, None if direction is None else tuple(np.round(direction, 14)), n)
        if key not in store:
            store[key] = build_family(kind, dirac, direction, n)
        return store[key]

    return get


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one summary line per acceptance criterion, filled in by test_acceptance
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
