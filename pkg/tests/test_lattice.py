import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from twoscale.errors import InvalidParameterError
from twoscale.lattice import build_lattice, kpath_from_anchors, reciprocal, rotation_matrix, standard_kpath


def test_duality(lattice):
    direct = lattice.direct_matrix
    dual = lattice.dual_matrix
    assert np.allclose(direct.T @ dual, 2 * np.pi * np.eye(2), atol=1e-13)


def test_cell_area(lattice):
    assert lattice.cell_area == pytest.approx(25 * np.sqrt(3) / 2, rel=1e-14)


def test_dirac_momentum_from_definition(lattice):
    assert np.allclose(lattice.K, -(lattice.a1s + lattice.a2s) / 3, atol=1e-15)
    assert np.linalg.norm(lattice.K) == pytest.approx(4 * np.pi / 15, rel=1e-13)


def test_dirac_momentum_in_first_zone(lattice):
    assert lattice.in_first_zone(lattice.K)


def test_reciprocal_examples(lattice):
    assert np.allclose(reciprocal(lattice, (0, 0)), 0)
    assert np.allclose(reciprocal(lattice, (1, 0)), lattice.a1s)
    assert np.allclose(reciprocal(lattice, (-1, -1)), 3 * lattice.K, atol=1e-14)


def test_rotation_permutes_first_shell(lattice):
    shell = [(1, 0), (0, -1), (-1, 1)]
    shell = shell + [(-a, -b) for a, b in shell]
    pts = lattice.momentum(np.array(shell))
    rotated = pts @ rotation_matrix(2 * np.pi / 3).T
    for p in rotated:
        assert np.min(np.linalg.norm(pts - p, axis=1)) <= 1e-12


def test_integer_rotation_action(lattice):
    m = np.array([[1, 0], [0, 1], [2, -3]])
    lhs = lattice.momentum(m) @ rotation_matrix(2 * np.pi / 3).T
    rhs = lattice.momentum(m @ lattice.rotation_index.T)
    assert np.allclose(lhs, rhs, atol=1e-12)
    rk = rotation_matrix(2 * np.pi / 3) @ lattice.K
    assert np.allclose(rk, lattice.K + lattice.momentum(lattice.rotation_shift), atol=1e-12)


def test_standard_path_endpoints(lattice):
    path = standard_kpath(lattice, 1)
    kappa = (-2 * lattice.a1s + lattice.a2s) / 3
    expected = [kappa, np.zeros(2), -lattice.a1s, kappa]
    assert len(path) == 4
    assert np.allclose(path.samples, np.array(expected), atol=1e-14)


def test_standard_path_count_and_closure(lattice):
    path = standard_kpath(lattice, 20)
    assert len(path) == 61
    assert np.allclose(path.samples[0], path.samples[-1])
    assert np.all(np.diff(path.arclength) >= 0)


def test_duplicate_anchor_keeps_zero_step():
    path = kpath_from_anchors(["A", "A", "B"], [np.zeros(2), np.zeros(2), np.ones(2)], 2)
    steps = np.diff(path.arclength)
    assert steps[0] == 0 and steps[1] == 0
    assert path.arclength[-1] == pytest.approx(np.sqrt(2))


@pytest.mark.parametrize("bad", [0.0, -1.0, np.inf, np.nan])
def test_rejects_bad_lattice_constant(bad):
    with pytest.raises(InvalidParameterError):
        build_lattice(bad)


@settings(max_examples=40, deadline=None)
@given(st.floats(min_value=0.1, max_value=100.0))
def test_duality_for_any_constant(a0):
    lat = build_lattice(a0)
    assert np.allclose(lat.direct_matrix.T @ lat.dual_matrix, 2 * np.pi * np.eye(2), atol=1e-12)
    assert lat.in_first_zone(lat.K)
