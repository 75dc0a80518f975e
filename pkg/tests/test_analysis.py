import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from twoscale.analysis import (
    DiracPairTracker,
    ExactSetup,
    SpectralSample,
    compare_dirac_branch,
    effective_source,
    eigvec_distance,
    fit_slope,
    greedy_match,
    match_to_exact,
    oscillation_check,
    parallel_map,
    reconstruct,
    subspace_distance,
    weak_convergence_check,
)
from twoscale.effective import EffectiveModel, compute_blocks
from twoscale.errors import InvalidParameterError, ResolutionError
from twoscale.exactsolver import consistent_fine_cutoff, folded_reference, ExactOperatorSpec
from twoscale.fourier import FourierField, PlaneWaveBasis
from twoscale.perturbation import ReducedFamily


def _grid(lattice, n):
    s = np.arange(n) / n
    s1, s2 = np.meshgrid(s, s, indexing="ij")
    return s1[..., None] * lattice.a1 + s2[..., None] * lattice.a2


def _tiny_setup(lattice, rng, M=2):
    micro = PlaneWaveBasis(lattice, 1)
    macro = PlaneWaveBasis(lattice, 1)
    vecs = rng.normal(size=(M, micro.dim)) + 1j * rng.normal(size=(M, micro.dim))
    fam = ReducedFamily("F0", vecs)
    alpha = rng.normal(size=(M, macro.dim)) + 1j * rng.normal(size=(M, macro.dim))
    return micro, macro, fam, alpha


def test_reconstruct_matches_pointwise_product(lattice, rng):
    micro, macro, fam, alpha = _tiny_setup(lattice, rng)
    inv = 2
    fine = PlaneWaveBasis(lattice, inv * micro.cutoff + macro.cutoff)
    out = reconstruct(fam, alpha, inv, fine, macro, micro)
    pts = _grid(lattice, 24)
    expected = sum(
        FourierField(macro, alpha[j]).values(pts) * FourierField(micro, fam.vectors[j]).values(pts * inv)
        for j in range(fam.M)
    )
    got = FourierField(fine, out).values(pts)
    assert np.max(np.abs(got - expected)) <= 1e-12 * np.max(np.abs(expected))
    # norm against cell quadrature
    quad = np.mean(np.abs(expected) ** 2) * lattice.cell_area
    assert np.sum(np.abs(out) ** 2) == pytest.approx(quad, rel=1e-8)


def test_reconstruct_index_arithmetic(lattice):
    micro = PlaneWaveBasis(lattice, 1)
    macro = PlaneWaveBasis(lattice, 1)
    vec = np.zeros((1, micro.dim), dtype=complex)
    vec[0, micro.index((1, -1))] = 1.0
    alpha = np.zeros((1, macro.dim), dtype=complex)
    alpha[0, macro.index((0, 1))] = 1.0
    fine = PlaneWaveBasis(lattice, 4)
    out = reconstruct(ReducedFamily("F0", vec), alpha, 3, fine, macro, micro)
    nz = np.flatnonzero(out)
    assert len(nz) == 1 and tuple(fine.modes[nz[0]]) == (3, -2)


def test_constant_envelope_embeds_the_member(lattice, dirac, micro_basis):
    macro = PlaneWaveBasis(lattice, 0)
    fam = ReducedFamily("F0", dirac.pair)
    alpha = np.array([[np.sqrt(lattice.cell_area)], [0.0]])
    fine = PlaneWaveBasis(lattice, 2 * micro_basis.cutoff)
    out = reconstruct(fam, alpha, 2, fine, macro, micro_basis)
    assert np.allclose(out[fine.index(2 * micro_basis.modes)], dirac.w1)
    assert np.linalg.norm(out) == pytest.approx(1.0)


def test_reconstruct_is_linear(lattice, rng):
    micro, macro, fam, a = _tiny_setup(lattice, rng)
    b = rng.normal(size=a.shape)
    fine = PlaneWaveBasis(lattice, 3)
    lhs = reconstruct(fam, 2 * a - b, 2, fine, macro, micro)
    rhs = 2 * reconstruct(fam, a, 2, fine, macro, micro) - reconstruct(fam, b, 2, fine, macro, micro)
    assert np.allclose(lhs, rhs, atol=1e-13)


def test_reconstruct_needs_enough_fine_modes(lattice, rng):
    micro, macro, fam, a = _tiny_setup(lattice, rng)
    with pytest.raises(ResolutionError):
        reconstruct(fam, a, 2, PlaneWaveBasis(lattice, 2), macro, micro)


def test_distance_examples(rng):
    psi = rng.normal(size=10) + 1j * rng.normal(size=10)
    assert eigvec_distance(psi, psi) == 0
    assert eigvec_distance(psi, np.exp(1.3j) * psi) <= 1e-15
    e = np.eye(10)
    assert eigvec_distance(e[0], e[1]) == pytest.approx(np.sqrt(2))


vectors = st.lists(st.floats(-1, 1, allow_nan=False), min_size=8, max_size=8).filter(
    lambda v: np.linalg.norm(v) > 1e-3
)


@settings(max_examples=60, deadline=None)
@given(vectors, vectors, vectors, st.floats(0, 2 * np.pi))
def test_distance_is_a_pseudometric_on_rays(a, b, c, theta):
    a, b, c = (np.array(x[:4]) + 1j * np.array(x[4:]) for x in (a, b, c))
    assert eigvec_distance(a, b) == pytest.approx(eigvec_distance(b, a), abs=1e-12)
    assert eigvec_distance(a, np.exp(1j * theta) * a) <= 1e-7
    assert eigvec_distance(a, c) <= eigvec_distance(a, b) + eigvec_distance(b, c) + 1e-12
    assert 0 <= eigvec_distance(a, b) <= 2


def test_subspace_distance_picks_closest_ray(rng):
    q, _ = np.linalg.qr(rng.normal(size=(12, 2)))
    psi = 0.6 * q[:, 0] - 0.8j * q[:, 1]
    assert subspace_distance(psi, q) <= 1e-14
    psi2 = psi + 0.1 * np.linalg.qr(np.column_stack([q, rng.normal(size=12)]))[0][:, 2]
    assert subspace_distance(psi2, q) == pytest.approx(eigvec_distance(psi2, psi), rel=1e-10)


def test_greedy_match():
    ov = np.array([[0.9, 0.2, 0.1], [0.8, 0.85, 0.3]])
    assert greedy_match(ov).tolist() == [0, 1]


def test_fit_slope_recovers_power():
    g = np.logspace(-2, -1, 6)
    assert fit_slope(g, 3 * g**2.5, (1e-2, 1e-1)) == pytest.approx(2.5)
    with pytest.raises(InvalidParameterError):
        fit_slope(g, g, (1.0, 2.0))


def test_parallel_map_keeps_order():
    assert parallel_map(lambda x: x * x, range(7), workers=3) == [x * x for x in range(7)]


def test_match_prefers_largest_overlap(rng):
    q, _ = np.linalg.qr(rng.normal(size=(8, 3)))
    sample = SpectralSample(np.array([-1.0, 0.0, 2.0]), q)
    m = match_to_exact(q[:, 2] + 0.01 * q[:, 0], 1.9, sample)
    assert m.exact_energy == 2.0
    assert m.delta == pytest.approx(0.1)


def test_oscillation_single_surviving_term(lattice):
    inv = 3
    f = FourierField.from_modes(PlaneWaveBasis(lattice, 1), {(1, 0): 0.7, (0, 0): 2.0})
    g = FourierField.from_modes(PlaneWaveBasis(lattice, 3), {(-3, 0): 1.1 - 0.4j, (1, 1): 5.0})
    assert oscillation_check(g, f, [inv])[0] == pytest.approx(abs((1.1 - 0.4j) * 0.7))


def test_oscillation_against_quadrature(lattice, rng):
    f = FourierField(PlaneWaveBasis(lattice, 1), rng.normal(size=9) + 1j * rng.normal(size=9))
    g = FourierField(PlaneWaveBasis(lattice, 4), rng.normal(size=81) + 1j * rng.normal(size=81))
    for inv in (2, 3, 4, 5):
        pts = _grid(lattice, 40)
        total = np.mean(g.values(pts) * f.values(pts * inv)) * lattice.cell_area
        mean_part = g.coefficient((0, 0)) * f.coefficient((0, 0))
        assert oscillation_check(g, f, [inv])[0] == pytest.approx(abs(total - mean_part), abs=1e-10)


def test_oscillation_vanishes_beyond_support(lattice, rng):
    f = FourierField(PlaneWaveBasis(lattice, 3), rng.normal(size=49))
    g = FourierField(PlaneWaveBasis(lattice, 2), rng.normal(size=25))
    assert oscillation_check(g, f, [3, 4, 7]) == [0.0, 0.0, 0.0]
    const = FourierField.from_modes(PlaneWaveBasis(lattice, 0), {(0, 0): 1.0})
    assert oscillation_check(const, f, [1, 2]) == [0.0, 0.0]


def _f0_model(dirac, families, inv=7, nu=2):
    fam = families("F0")
    return EffectiveModel(compute_blocks(fam, dirac), fam, 1.0 / inv, nu, None, dirac.lattice)


def _smooth_envelope(model, rng):
    """Unit-norm random envelope whose coefficients decay like a Gaussian in the mode index."""
    modes = model.macro_basis.modes
    decay = np.exp(-0.5 * np.sum(modes.astype(float) ** 2, axis=1))
    env = (rng.normal(size=(model.family.M, len(modes))) + 1j * rng.normal(size=(model.family.M, len(modes)))) * decay
    env = env.reshape(-1)
    return env / np.linalg.norm(env)


def test_weak_convergence_zero_envelope(dirac, families, v_micro, micro_basis, rng):
    m = _f0_model(dirac, families)
    a = rng.normal(size=m.dim)
    out = weak_convergence_check(m, a, np.zeros(m.dim), [8], np.zeros(2), v_micro, dirac.E_F, micro_basis)
    assert out == [0.0]


def test_weak_convergence_non_increasing(dirac, families, v_micro, micro_basis, rng):
    m = _f0_model(dirac, families)
    a, b = (_smooth_envelope(m, rng) for _ in range(2))
    d = weak_convergence_check(m, a, b, [4, 8, 16], np.array([0.1, 0.2]), v_micro, dirac.E_F, micro_basis)
    assert all(d[i + 1] <= d[i] + 1e-12 for i in range(len(d) - 1))


def test_tracker_starts_on_the_pair(dirac, families):
    m = _f0_model(dirac, families)
    sample = effective_source(m)(np.zeros(2))
    pick = DiracPairTracker(m).select(sample)
    assert np.allclose(sample.energies[pick], 0.0, atol=1e-12)


def test_matched_energy_is_folded_value(dirac, families, v_micro, micro_basis, lattice):
    inv = 2
    fine = consistent_fine_cutoff(inv, micro_basis.cutoff)
    setup = ExactSetup(v_micro, dirac.E_F, inv, fine, n_states=8)
    m = _f0_model(dirac, families, inv=inv, nu=0)
    k = np.array([0.2, 0.1])
    comp = compare_dirac_branch({"F0": m}, [k], setup, micro_basis)["F0"]
    folded = folded_reference(ExactOperatorSpec(inv, k, v_micro, None, fine, dirac.E_F), micro_basis.cutoff, 4) * inv
    for match in comp.points[0].matches:
        assert np.min(np.abs(folded - match.exact_energy)) <= 1e-8
