import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from twoscale.errors import DimensionError, InvalidInputError
from twoscale.fourier import (
    FourierField,
    PlaneWaveBasis,
    check_honeycomb_symmetry,
    honeycomb_potential,
    multiplication_matrix,
    multiply,
    ng_potential,
)


def _cell_grid(lattice, n):
    s = (np.arange(n) + 0.0) / n
    s1, s2 = np.meshgrid(s, s, indexing="ij")
    return s1[..., None] * lattice.a1 + s2[..., None] * lattice.a2


def _values(basis, coeffs, pts):
    return FourierField(basis, coeffs).values(pts)


def _random_field(basis, rng, real=False):
    c = rng.normal(size=basis.dim) + 1j * rng.normal(size=basis.dim)
    if real:
        neg = basis.index(-basis.modes)
        c = 0.5 * (c + np.conj(c[neg]))
    return FourierField(basis, c)


def test_basis_index_roundtrip(lattice):
    b = PlaneWaveBasis(lattice, 3)
    assert b.dim == 49
    assert np.array_equal(b.index(b.modes), np.arange(b.dim))
    assert b.index((4, 0)) == -1


def test_honeycomb_coefficient_and_value(lattice):
    f = honeycomb_potential(PlaneWaveBasis(lattice, 1), 1.0)
    assert f.coefficient((1, 0)) == pytest.approx(np.sqrt(lattice.cell_area))
    assert f.values(np.zeros(2)).real == pytest.approx(6.0)


def test_honeycomb_is_symmetric(v_micro):
    rep = check_honeycomb_symmetry(v_micro)
    assert rep.passed
    assert max(rep.residuals.values()) <= 1e-12


def test_constant_field_is_symmetric(lattice):
    b = PlaneWaveBasis(lattice, 2)
    assert check_honeycomb_symmetry(FourierField.from_modes(b, {(0, 0): 3.0})).passed


def test_ng_breaks_rotation(lattice):
    b = PlaneWaveBasis(lattice, 2)
    rep = check_honeycomb_symmetry(ng_potential(b, 5.0))
    assert not rep.rotation
    assert ng_potential(b, 0.0).is_zero()
    assert ng_potential(b, 1.0).values(np.zeros(2)).real == pytest.approx(6.0)


def test_symmetry_check_rejects_complex_field(lattice):
    b = PlaneWaveBasis(lattice, 1)
    with pytest.raises(InvalidInputError):
        check_honeycomb_symmetry(FourierField.from_modes(b, {(1, 0): 1.0}))


def test_symmetry_check_is_idempotent(v_micro):
    assert check_honeycomb_symmetry(v_micro).residuals == check_honeycomb_symmetry(v_micro).residuals


def test_multiply_by_constant(lattice, rng):
    b = PlaneWaveBasis(lattice, 2)
    c = 1.7
    f = FourierField.from_modes(b, {(0, 0): c * np.sqrt(lattice.cell_area)})
    u = rng.normal(size=b.dim) + 1j * rng.normal(size=b.dim)
    out, ob = multiply(f, u, b, b)
    assert np.allclose(out, c * u, atol=1e-13)


def test_multiply_single_modes(lattice):
    b = PlaneWaveBasis(lattice, 2)
    f = FourierField.from_modes(b, {(1, -1): 1.0})
    u = np.zeros(b.dim, dtype=complex)
    u[b.index((0, 2))] = 1.0
    out, ob = multiply(f, u, b)
    nz = np.nonzero(np.abs(out) > 0)[0]
    assert len(nz) == 1 and tuple(ob.modes[nz[0]]) == (1, 1)


def test_multiply_matches_real_space_quadrature(lattice, rng):
    b = PlaneWaveBasis(lattice, 3)
    f = _random_field(b, rng)
    u = rng.normal(size=b.dim) + 1j * rng.normal(size=b.dim)
    out, ob = multiply(f, u, b)
    pts = _cell_grid(lattice, 64)
    lhs = _values(ob, out, pts)
    rhs = f.values(pts) * _values(b, u, pts)
    assert np.max(np.abs(lhs - rhs)) <= 1e-10 * np.max(np.abs(rhs))


def test_multiply_refuses_silent_truncation(lattice, rng):
    b = PlaneWaveBasis(lattice, 2)
    f = _random_field(b, rng)
    u = rng.normal(size=b.dim)
    with pytest.raises(DimensionError):
        multiply(f, u, b, b)
    out, _ = multiply(f, u, b, b, truncate=True)
    assert out.shape == (b.dim,)


def test_multiplication_matrix_agrees_with_multiply(lattice, rng):
    b = PlaneWaveBasis(lattice, 3)
    f = _random_field(PlaneWaveBasis(lattice, 1), rng)
    u = rng.normal(size=b.dim)
    out, _ = multiply(f, u, b, b, truncate=True)
    assert np.allclose(multiplication_matrix(f, b) @ u, out, atol=1e-12)


def test_parseval_against_quadrature(lattice, rng):
    b = PlaneWaveBasis(lattice, 3)
    u = rng.normal(size=b.dim) + 1j * rng.normal(size=b.dim)
    vals = _values(b, u, _cell_grid(lattice, 32))
    quad = np.mean(np.abs(vals) ** 2) * lattice.cell_area
    assert quad == pytest.approx(np.sum(np.abs(u) ** 2), rel=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=2**31 - 1))
def test_real_field_gives_hermitian_matrix(seed):
    from twoscale.lattice import build_lattice

    lat = build_lattice(5.0)
    rng = np.random.default_rng(seed)
    f = _random_field(PlaneWaveBasis(lat, 2), rng, real=True)
    m = multiplication_matrix(f, PlaneWaveBasis(lat, 4))
    assert np.max(np.abs(m - m.conj().T)) <= 1e-12
