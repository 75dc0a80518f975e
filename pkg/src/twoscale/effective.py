"""Effective two-scale operators built on a reduced family.

Block layout follows the family order: the first two members are the
Fermi pair, the remaining ``n = M - 2`` members carry the blocks S, M, T, L.
Vector-valued blocks store the momentum component on the leading axis,
so ``coupling_T[c, a, b] = <psi_a, (-i d_c) psi_{b+2}>``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

import numpy as np
import scipy.linalg

from .errors import (
    DependentFamilyError,
    DimensionError,
    InvalidParameterError,
    NumericalError,
    ReductionUndefinedError,
    SymmetryViolationError,
)
from .fourier import FourierField, PlaneWaveBasis, multiplication_matrix
from .lattice import Lattice
from .microsolver import DiracData, apply_resolvent, grad_K
from .perturbation import ReducedFamily, _real_phase

SIGMA = np.array(
    [
        [[0, 1], [1, 0]],
        [[0, -1j], [1j, 0]],
        [[1, 0], [0, -1]],
    ],
    dtype=complex,
)
D_MATRIX = SIGMA[2] + 1j * SIGMA[0]


def _herm(x: np.ndarray) -> np.ndarray:
    return 0.5 * (x + np.conj(np.swapaxes(x, -1, -2)))


@dataclass(frozen=True, eq=False)
class EffectiveBlocks:
    gram_S: np.ndarray
    energy_M: np.ndarray
    coupling_T: np.ndarray  # (2, 2, n)
    velocity_L: np.ndarray  # (2, n, n)
    v_F: float

    @property
    def n_extra(self) -> int:
        return self.gram_S.shape[0]

    @property
    def M(self) -> int:
        return self.n_extra + 2

    def mass(self) -> np.ndarray:
        out = np.zeros((self.M, self.M), dtype=complex)
        out[:2, :2] = np.eye(2)
        out[2:, 2:] = self.gram_S
        return out

    def energy(self) -> np.ndarray:
        out = np.zeros((self.M, self.M), dtype=complex)
        out[2:, 2:] = self.energy_M
        return out

    def velocity(self) -> np.ndarray:
        out = np.zeros((2, self.M, self.M), dtype=complex)
        for c in range(2):
            out[c, :2, :2] = self.v_F * SIGMA[c]
            out[c, :2, 2:] = self.coupling_T[c]
            out[c, 2:, :2] = np.conj(self.coupling_T[c]).T
            out[c, 2:, 2:] = self.velocity_L[c]
        return out


def empty_blocks(v_F: float) -> EffectiveBlocks:
    z = np.zeros((0, 0), dtype=complex)
    return EffectiveBlocks(z, z, np.zeros((2, 2, 0), dtype=complex), np.zeros((2, 0, 0), dtype=complex), float(v_F))


def compute_blocks(family: ReducedFamily, d: DiracData) -> EffectiveBlocks:
    """Blocks from direct scalar products of the family members."""
    basis = d.basis
    extra = np.asarray(family.vectors[2:])
    if len(extra) == 0:
        return empty_blocks(d.v_F)
    pair = d.pair
    S = np.conj(extra) @ extra.T
    h = d.h_K()
    shifted = extra @ h.T - d.E_F * extra
    Mb = np.conj(extra) @ shifted.T
    g = grad_K(extra, basis)  # (2, n, dim)
    T = np.stack([np.conj(pair) @ g[c].T for c in range(2)])
    L = np.stack([np.conj(extra) @ g[c].T for c in range(2)])
    return EffectiveBlocks(_herm(S), _herm(Mb), T, _herm(L), d.v_F)


@dataclass(frozen=True)
class ClosedFormConstants:
    t: float
    tp: float
    r: float
    rp: float
    s: float
    sp: float
    chi: float
    gamma1: float
    gamma2: float
    vtilde_F: float | None
    E_F: float
    E3: float | None
    imaginary_residue: dict = field(repr=False)

    def as_rows(self):
        names = ["t", "tp", "r", "rp", "s", "sp", "chi", "gamma1", "gamma2"]
        rows = [(n, getattr(self, n), self.imaginary_residue[n]) for n in names]
        if self.vtilde_F is not None:
            rows.append(("vtilde_F", self.vtilde_F, self.imaginary_residue["vtilde_F"]))
        return rows


class _Derivs:
    """Cached first derivatives of the Fermi pair and their resolvent images."""

    def __init__(self, d: DiracData):
        self.d = d
        self.g = [grad_K(w, d.basis) for w in (d.w1, d.w2)]  # g[a][n] = (-i d_n) w_a
        self.rg = [[apply_resolvent(d, self.g[a][n]) for n in range(2)] for a in range(2)]

    def dR(self, a: int, j: int, m: int) -> np.ndarray:
        """(-i d_j) R (-i d_m) w_a."""
        return grad_K(self.rg[a][m], self.d.basis)[j]


def third_band_vector(d: DiracData) -> np.ndarray | None:
    """Band m_F+2 at K in the real (parity-conjugation invariant) gauge."""
    band = d.m_F + 2
    if band > len(d.energies):
        return None
    return _real_phase(d.band_vector(band))


def closed_form_constants(d: DiracData, tol: float = 1e-6) -> ClosedFormConstants:
    """Scalar constants of the closed-form effective matrices.

    The sigma_2 weights s and s' are read off the (1,2)/(2,1) entries with
    the factor -i that makes them real.
    """
    x = _Derivs(d)
    ip = np.vdot
    raw = {
        "t": ip(x.rg[0][0], x.rg[0][0]),
        "tp": ip(x.g[0][0], x.rg[0][0]),
        "r": ip(x.rg[0][0], x.rg[1][0]),
        "rp": ip(x.g[0][0], x.rg[1][0]),
        "s": -1j * ip(x.rg[0][1], x.rg[0][0]),
        "sp": -1j * ip(x.g[0][1], x.rg[0][0]),
        "chi": ip(x.rg[0][0], x.dR(0, 0, 0)),
        "gamma1": ip(x.rg[0][0], x.dR(1, 1, 1)),
        "gamma2": ip(x.rg[0][1], x.dR(1, 0, 1)),
    }
    w3 = third_band_vector(d)
    E3 = None
    if w3 is not None:
        raw["vtilde_F"] = -1j * ip(d.w1, grad_K(w3, d.basis)[0])
        E3 = float(d.energies[d.m_F + 1])
    imag = {k: float(abs(v.imag)) for k, v in raw.items()}
    worst = max(imag, key=imag.get)
    if imag[worst] > tol:
        raise SymmetryViolationError(
            f"constant {worst} has imaginary part {imag[worst]:.2e}; check the gauge or raise the cutoff"
        )
    vals = {k: float(v.real) for k, v in raw.items()}
    return ClosedFormConstants(
        vals["t"], vals["tp"], vals["r"], vals["rp"], vals["s"], vals["sp"],
        vals["chi"], vals["gamma1"], vals["gamma2"], vals.get("vtilde_F"),
        d.E_F, E3, imag,
    )


def _pauli_combo(c0: float, c2: float) -> np.ndarray:
    return c0 * np.eye(2) + c2 * SIGMA[1]


def predicted_blocks(
    kind: str,
    constants: ClosedFormConstants,
    theta_k: float | None = None,
    v_F: float | None = None,
) -> EffectiveBlocks:
    """Blocks filled from the closed forms implied by the honeycomb symmetries."""
    c = constants
    vf = 0.0 if v_F is None else float(v_F)
    if kind == "F1k":
        if theta_k is None:
            raise InvalidParameterError("F1k needs the direction angle")
        e1, e2 = np.exp(1j * theta_k), np.exp(2j * theta_k)
        khat = np.array([np.cos(theta_k), np.sin(theta_k)])
        S = np.array([[c.t, c.r * e2], [c.r / e2, c.t]], dtype=complex)
        M = -np.array([[c.tp, c.rp * e2], [c.rp / e2, c.tp]], dtype=complex)
        T = np.zeros((2, 2, 2), dtype=complex)
        T[:, 0, 0] = _pauli_combo(c.tp, c.sp) @ khat
        T[:, 0, 1] = c.rp * e1 * np.array([1, 1j])
        T[:, 1, 0] = c.rp / e1 * np.array([1, -1j])
        T[:, 1, 1] = _pauli_combo(c.tp, -c.sp) @ khat
        L = np.zeros((2, 2, 2), dtype=complex)
        diag = c.chi * np.array([np.cos(2 * theta_k), -np.sin(2 * theta_k)])
        off = 2 * c.gamma1 * np.array([np.cos(theta_k), np.sin(theta_k)])
        for j in range(2):
            L[j] = np.array([[diag[j], off[j] / e1], [off[j] * e1, diag[j]]]) + c.gamma2 * SIGMA[j]
        return EffectiveBlocks(S, M, T, L, vf)
    if kind == "F1":
        D, Dc = D_MATRIX, np.conj(D_MATRIX)
        S = np.block([[_pauli_combo(c.t, c.s), c.r * D], [c.r * Dc, _pauli_combo(c.t, -c.s)]])
        M = -np.block([[_pauli_combo(c.tp, c.sp), c.rp * D], [c.rp * Dc, _pauli_combo(c.tp, -c.sp)]])
        tp, sp, rp = c.tp, c.sp, c.rp
        T1 = np.array([[tp, -1j * sp, rp, 1j * rp], [rp, -1j * rp, tp, 1j * sp]])
        T2 = np.array([[1j * sp, tp, 1j * rp, -rp], [-1j * rp, -rp, -1j * sp, tp]])
        chi, g1, g2 = c.chi, c.gamma1, c.gamma2
        L1 = np.array(
            [
                [chi, 0, 2 * g1 + g2, -1j * g1],
                [0, -chi, -1j * g1, g2],
                [2 * g1 + g2, 1j * g1, chi, 0],
                [1j * g1, g2, 0, -chi],
            ]
        )
        L2 = np.array(
            [
                [0, -chi, -1j * g2, g1],
                [-chi, 0, g1, -1j * (2 * g1 + g2)],
                [1j * g2, g1, 0, -chi],
                [g1, 1j * (2 * g1 + g2), -chi, 0],
            ]
        )
        return EffectiveBlocks(S, M, np.stack([T1, T2]).astype(complex), np.stack([L1, L2]).astype(complex), vf)
    if kind == "F3":
        if c.vtilde_F is None or c.E3 is None:
            raise InvalidParameterError("F3 closed form needs the third band")
        S = np.eye(1, dtype=complex)
        M = np.array([[c.E3 - c.E_F]], dtype=complex)
        T = np.zeros((2, 2, 1), dtype=complex)
        T[:, 0, 0] = -c.vtilde_F * np.array([-1j, 1])
        T[:, 1, 0] = -c.vtilde_F * np.array([1j, 1])
        L = np.zeros((2, 1, 1), dtype=complex)
        return EffectiveBlocks(S, M, T, L, vf)
    raise InvalidParameterError(f"no closed form for family kind {kind!r}")


@dataclass(frozen=True)
class StructureReport:
    deviations: dict
    tol: float

    @property
    def passed(self) -> bool:
        return all(v <= self.tol for v in self.deviations.values())

    @property
    def worst(self) -> float:
        return max(self.deviations.values(), default=0.0)


def validate_structure(direct: EffectiveBlocks, predicted: EffectiveBlocks, tol: float = 1e-8) -> StructureReport:
    dev = {}
    for name in ("gram_S", "energy_M", "coupling_T", "velocity_L"):
        a, b = getattr(direct, name), getattr(predicted, name)
        if a.shape != b.shape:
            raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} differ")
        dev[name] = float(np.max(np.abs(a - b), initial=0.0))
    return StructureReport(dev, tol)


@dataclass(frozen=True)
class LemmaReport:
    residuals: dict
    tol: float

    @property
    def passed(self) -> bool:
        return all(v <= self.tol for v in self.residuals.values())


def _spread(values) -> float:
    v = np.asarray(values)
    return float(np.max(np.abs(v - v.mean())))


def three_derivative_tensor(d: DiracData, x: _Derivs | None = None) -> dict:
    """F[a, b, q, j, m] = <R d_q w_a, d_j R d_m w_b> with 1-based keys."""
    x = x or _Derivs(d)
    out = {}
    for a, b, q, j, m in product(range(2), repeat=5):
        out[a + 1, b + 1, q + 1, j + 1, m + 1] = np.vdot(x.rg[a][q], x.dR(b, j, m))
    return out


def symmetry_lemma_checks(d: DiracData, tol: float = 1e-8) -> LemmaReport:
    x = _Derivs(d)
    res = {}
    two = {
        (a, b): np.array([[np.vdot(x.rg[a][n], x.rg[b][j]) for j in range(2)] for n in range(2)])
        for a in range(2)
        for b in range(2)
    }
    t = two[0, 0][0, 0].real
    s = (1j * two[0, 0][0, 1]).real
    r = two[0, 1][0, 0].real
    res["two_derivative_11"] = float(np.max(np.abs(two[0, 0] - _pauli_combo(t, s))))
    res["two_derivative_22"] = float(np.max(np.abs(two[1, 1] - _pauli_combo(t, -s))))
    res["two_derivative_12"] = float(np.max(np.abs(two[0, 1] - r * D_MATRIX)))
    res["two_derivative_21"] = float(np.max(np.abs(two[1, 0] - r * np.conj(D_MATRIX))))
    F = three_derivative_tensor(d, x)
    f = lambda a, b, q, j, m: F[a, b, q, j, m]
    group_real = [f(1, 1, 1, 2, 2), f(1, 1, 2, 1, 2), f(1, 1, 2, 2, 1), f(2, 2, 1, 2, 2), f(2, 2, 2, 1, 2),
                  f(2, 2, 2, 2, 1), -f(1, 1, 1, 1, 1), -f(2, 2, 1, 1, 1)]
    res["aa_chi1_relations"] = _spread(group_real)
    res["aa_chi1_real"] = float(np.max(np.abs(np.imag(group_real))))
    group_imag = [f(1, 1, 1, 1, 2), f(1, 1, 2, 1, 1), f(1, 1, 1, 2, 1), -f(2, 2, 1, 1, 2), -f(2, 2, 2, 1, 1),
                  -f(2, 2, 1, 2, 1), -f(1, 1, 2, 2, 2), f(2, 2, 2, 2, 2)]
    res["aa_chi2_relations"] = _spread(group_imag)
    res["chi2_zero"] = float(abs(-1j * f(1, 1, 2, 2, 2)))
    gammas = []
    for (q, j, m), (q2, j2, m2) in (((1, 2, 2), (2, 1, 1)), ((2, 1, 2), (1, 2, 1)), ((2, 2, 1), (1, 1, 2)),
                                    ((1, 1, 1), (2, 2, 2))):
        grp = [f(1, 2, q, j, m), f(2, 1, q, j, m), 1j * f(1, 2, q2, j2, m2), -1j * f(2, 1, q2, j2, m2)]
        gammas.append(np.mean(grp))
        res[f"ab_relations_{q}{j}{m}"] = _spread(grp)
        res[f"ab_real_{q}{j}{m}"] = float(np.max(np.abs(np.imag(grp))))
    g1, g2, g3, gsum = gammas
    res["gamma_sum"] = float(abs(gsum - (g1 + g2 + g3)))
    res["gamma1_equals_gamma3"] = float(abs(g1 - g3))
    return LemmaReport(res, tol)


@dataclass(frozen=True, eq=False)
class EffectiveModel:
    blocks: EffectiveBlocks
    family: ReducedFamily
    epsilon: float
    nu: int
    V: FourierField | None
    lattice: Lattice
    allow_truncation: bool = False

    def __post_init__(self):
        if not (self.epsilon > 0):
            raise InvalidParameterError("epsilon must be positive")
        if self.nu < 0:
            raise InvalidParameterError("nu must be non-negative")
        if self.V is not None and not self.V.is_zero() and self.V.support > self.nu and not self.allow_truncation:
            from .errors import ResolutionError

            raise ResolutionError(
                f"macro potential has modes up to {self.V.support} beyond nu={self.nu}; "
                "set allow_truncation to project it"
            )

    @property
    def macro_basis(self) -> PlaneWaveBasis:
        return PlaneWaveBasis(self.lattice, self.nu)

    @property
    def M(self) -> int:
        return self.blocks.M

    @property
    def dim(self) -> int:
        return self.M * self.macro_basis.dim

    def with_epsilon(self, epsilon: float) -> "EffectiveModel":
        return EffectiveModel(self.blocks, self.family, epsilon, self.nu, self.V, self.lattice, self.allow_truncation)

    def potential_matrix(self) -> np.ndarray:
        mb = self.macro_basis
        if self.V is None or self.V.is_zero():
            return np.zeros((mb.dim, mb.dim), dtype=complex)
        return multiplication_matrix(self.V, mb)


def build_model(family: ReducedFamily, d: DiracData, epsilon: float, nu: int, V: FourierField | None = None,
                allow_truncation: bool = False) -> EffectiveModel:
    return EffectiveModel(compute_blocks(family, d), family, float(epsilon), int(nu), V, d.lattice, allow_truncation)


def assemble_effective(model: EffectiveModel, k) -> tuple[np.ndarray, np.ndarray]:
    """Hamiltonian and mass matrix on C^M (x) plane waves, component-major ordering."""
    mb = model.macro_basis
    p = mb.momenta(k)
    eye = np.eye(mb.dim)
    b = model.blocks
    S, Mfull, L = b.mass(), b.energy(), b.velocity()
    local = np.diag(0.5 * model.epsilon * np.einsum("ij,ij->i", p, p)) + model.potential_matrix()
    H = np.kron(Mfull / model.epsilon, eye) + np.kron(S, local)
    for c in range(2):
        H += np.kron(L[c], np.diag(p[:, c]))
    return _herm(H), _herm(np.kron(S, eye))


@dataclass(frozen=True, eq=False)
class EffectiveSolution:
    energies: np.ndarray
    vectors: np.ndarray  # columns, mass-orthonormal
    M: int
    n_macro: int

    def envelope(self, i: int) -> np.ndarray:
        """Eigenvector i reshaped to (component, macro mode)."""
        return self.vectors[:, i].reshape(self.M, self.n_macro)


def _eigh_mass(H, mass, tag):
    try:
        return scipy.linalg.eigh(H, mass)
    except np.linalg.LinAlgError as exc:
        raise DependentFamilyError(f"mass matrix of family {tag} is not positive definite") from exc


def _solve_per_mode(model: EffectiveModel, k):
    # Without a macro potential every plane wave decouples into an M x M pencil.
    # Solving these separately avoids the eps*|H|/gap mixing that a full solve
    # incurs between nearly degenerate levels.
    mb = model.macro_basis
    p = mb.momenta(k)
    b = model.blocks
    S, Mfull, L = b.mass(), b.energy(), b.velocity()
    M, n = model.M, mb.dim
    vals = np.empty(M * n)
    vecs = np.zeros((M * n, M * n), dtype=complex)
    for j in range(n):
        h = Mfull / model.epsilon + S * (0.5 * model.epsilon * float(p[j] @ p[j])) + L[0] * p[j, 0] + L[1] * p[j, 1]
        w, v = _eigh_mass(_herm(h), _herm(S), model.family.tag)
        if M > 2:
            _refine_pair(_herm(h), _herm(S), w, v)
        vals[j * M:(j + 1) * M] = w
        vecs[j::n, j * M:(j + 1) * M] = v
    order = np.argsort(vals, kind="stable")
    return vals[order], vecs[:, order]


PAIR_REFINE_STEPS = 50


def _refine_pair(h, S, w, v):
    """Re-solve the two levels carried by the (w1, w2) components in place.

    The Dirac pair splitting is tiny next to the extra-component block, and a
    badly conditioned mass matrix amplifies rounding in the full pencil.  Here
    the extra components are eliminated by a Schur complement, leaving a 2 x 2
    pencil of small, well-scaled entries that is iterated to self-consistency.
    """
    weight = np.abs(v[0]) ** 2 + np.abs(v[1]) ** 2
    pair = np.sort(np.argsort(-weight, kind="stable")[:2])
    hw, hx, hxx = h[:2, :2], h[:2, 2:], h[2:, 2:]
    sw, sx, sxx = S[:2, :2], S[:2, 2:], S[2:, 2:]
    for rank, col in enumerate(pair):
        E = w[col]
        for _ in range(PAIR_REFINE_STEPS):
            off = hx - E * sx
            solve = np.linalg.solve(hxx - E * sxx, off.conj().T)
            lam, alpha = scipy.linalg.eigh(_herm(hw - off @ solve), sw)
            E_new = lam[rank]
            done = abs(E_new - E) <= 4 * np.finfo(float).eps * max(abs(E), np.max(np.abs(lam)))
            E = E_new
            if done:
                break
        a = alpha[:, rank]
        x = np.concatenate([a, -solve @ a])
        x /= np.sqrt(np.real(x.conj() @ S @ x))
        w[col], v[:, col] = E, x


def solve_effective(model: EffectiveModel, k, n_bands: int | None = None) -> EffectiveSolution:
    H, mass = assemble_effective(model, k)
    if model.V is None or model.V.is_zero():
        vals, vecs = _solve_per_mode(model, k)
    else:
        vals, vecs = _eigh_mass(H, mass, model.family.tag)
    resid = np.max(np.abs(H @ vecs - (mass @ vecs) * vals), initial=0.0)
    scale = max(1.0, float(np.max(np.abs(H))))
    if resid > 1e-8 * scale:
        raise NumericalError(f"generalized eigensolver residual {resid:.2e}")
    if n_bands is not None:
        sel = np.sort(np.argsort(np.abs(vals), kind="stable")[:n_bands])
        vals, vecs = vals[sel], vecs[:, sel]
    return EffectiveSolution(vals, vecs, model.M, model.macro_basis.dim)


@dataclass(frozen=True, eq=False)
class SchurOperator:
    hamiltonian: np.ndarray  # on C^2 (x) plane waves
    lift: np.ndarray  # maps a 2-component envelope to an M-component envelope
    M: int
    n_macro: int

    def lift_envelope(self, beta) -> np.ndarray:
        return (self.lift @ np.asarray(beta)).reshape(self.M, self.n_macro)


def schur_operator(model: EffectiveModel, k) -> SchurOperator:
    """Dirac operator with the first-order correction from eliminating the extra members."""
    mb = model.macro_basis
    n = mb.dim
    p = mb.momenta(k)
    eps = model.epsilon
    b = model.blocks
    H = np.kron(np.eye(2), model.potential_matrix())
    for c in range(2):
        H = H + b.v_F * np.kron(SIGMA[c], np.diag(p[:, c]))
    H = H + eps * np.kron(np.eye(2), np.diag(0.5 * np.einsum("ij,ij->i", p, p)))
    lift_lower = np.zeros((b.n_extra * n, 2 * n), dtype=complex)
    if b.n_extra:
        ev = np.linalg.eigvalsh(b.energy_M)
        if np.min(np.abs(ev)) < 1e-10:
            raise ReductionUndefinedError("energy block is singular; the reduction is undefined")
        Minv = np.linalg.inv(b.energy_M)
        for a in range(2):
            for c in range(2):
                coef = b.coupling_T[a] @ Minv @ np.conj(b.coupling_T[c]).T
                H = H - eps * np.kron(coef, np.diag(p[:, a] * p[:, c]))
        for c in range(2):
            lift_lower -= eps * np.kron(Minv @ np.conj(b.coupling_T[c]).T, np.diag(p[:, c]))
    lift = np.vstack([np.eye(2 * n), lift_lower])
    return SchurOperator(_herm(H), lift, b.M, n)
