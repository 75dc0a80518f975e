import numpy as np
import pytest

from twoscale.errors import InvalidParameterError
from twoscale.microsolver import apply_resolvent, directional_grad, fermi_projector_apply
from twoscale.perturbation import (
    build_family,
    dm_gamma,
    parse_family_tag,
    principal_angles,
    rs_expansion,
    span_projector,
    taylor_residuals,
)

E1 = np.array([1.0, 0.0])


@pytest.mark.parametrize(
    "kind,size", [("F0", 2), ("F1k", 4), ("F1", 6), ("F2k", 6), ("F2", 18)]
)
def test_family_sizes(families, kind, size):
    direction = E1 if kind.endswith("k") else None
    assert families(kind, direction).M == size


def test_excited_family_size(families):
    assert families("Fn", n=6).M == 6


def test_F0_is_the_pair(families, dirac):
    f = families("F0")
    assert np.array_equal(f.vectors, dirac.pair)


def test_F1k_along_e1(families, dirac):
    f = families("F1k", E1)
    basis = dirac.basis
    p1 = basis.momenta(basis.lattice.K)[:, 0]
    for a, w in enumerate((dirac.w1, dirac.w2)):
        assert np.allclose(f.vectors[2 + a], apply_resolvent(dirac, p1 * w), atol=1e-13)


def test_parse_tags():
    assert parse_family_tag("F1k") == ("F1k", None)
    assert parse_family_tag("F^6") == ("Fn", 6)
    for bad in ("F3", "F^1", "G0", "F^x"):
        with pytest.raises(InvalidParameterError):
            parse_family_tag(bad)


def test_direction_homogeneity(dirac):
    k = np.array([0.3, -0.8])
    a = build_family("F1k", dirac, k)
    b = build_family("F1k", dirac, 2 * k)
    assert np.max(np.abs(span_projector(a.vectors) - span_projector(b.vectors))) <= 1e-10


@pytest.mark.parametrize("ell", [1, 2])
def test_directional_span_inside_full_span(families, ell):
    full = span_projector(families(f"F{ell}").vectors)
    for angle in (0.2, 1.3, 2.9):
        d = np.array([np.cos(angle), np.sin(angle)])
        part = span_projector(families(f"F{ell}k", d).vectors)
        assert np.max(np.abs(full @ part - part)) <= 1e-10


def test_projected_gradient_reconstruction(dirac):
    d = np.array([0.6, 0.8])
    for w in (dirac.w1, dirac.w2):
        g = directional_grad(w, dirac.basis, d)
        manual = sum(np.vdot(wb, g) * wb for wb in (dirac.w1, dirac.w2))
        assert np.max(np.abs(fermi_projector_apply(dirac, g) - manual)) <= 1e-12


def test_zero_order_vectors_along_e1(dirac):
    rs = rs_expansion(dirac, E1)
    assert np.allclose(rs.U0_plus, (dirac.w1 + dirac.w2) / np.sqrt(2))
    assert rs.E1_plus == pytest.approx(dirac.v_F)
    assert rs.E1_minus == pytest.approx(-dirac.v_F)


def test_first_order_vector_is_orthogonal_to_U0(dirac):
    rs = rs_expansion(dirac, np.array([0.4, 0.9]))
    for eta in (1, -1):
        assert abs(np.vdot(rs.U0(eta), rs.U1(eta))) <= 1e-12


def test_first_gamma_matches_F1k(dirac, families):
    k = np.array([0.7, -0.2])
    f = families("F1k", k)
    for a in (1, 2):
        assert np.allclose(dm_gamma(dirac, k, 1, a), np.linalg.norm(k) * f.vectors[1 + a], atol=1e-12)


def test_gamma_rejects_bad_arguments(dirac):
    with pytest.raises(InvalidParameterError):
        dm_gamma(dirac, E1, 3, 1)
    with pytest.raises(InvalidParameterError):
        dm_gamma(dirac, np.zeros(2), 1, 1)


def test_principal_angles_simple():
    a = np.array([[1.0, 0, 0]])
    b = np.array([[np.cos(0.3), np.sin(0.3), 0]])
    assert principal_angles(a, b)[0] == pytest.approx(0.3, rel=1e-12)


def test_taylor_residuals_decrease(dirac):
    s = np.array([1e-3, 1e-2])
    res = taylor_residuals(dirac, np.array([0.3, 0.7]), s)
    assert res.energy[0] < res.energy[1]
    assert res.vector[0] < res.vector[1]
