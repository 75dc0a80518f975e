"""Microscopic Bloch problem: assembly, diagonalization, Dirac-point gauge fixing.

All vectors are plane-wave coefficient arrays of the periodic parts u, so
the Bloch function at quasimomentum q is exp(iqx) u(x).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import (
    DegenerateConeError,
    InvalidInputError,
    InvalidParameterError,
    NoDiracPointError,
    NumericalError,
    SpectralGapError,
    SymmetryViolationError,
)
from .fourier import FourierField, PlaneWaveBasis, multiplication_matrix
from .lattice import Lattice

OMEGA = np.exp(2j * np.pi / 3)
GAP_MARGIN = 1e-3
LEAKAGE_LIMIT = 1e-10


def assemble_h_q(q, v: FourierField, basis: PlaneWaveBasis) -> np.ndarray:
    """Dense matrix of 1/2 (-i grad + q)^2 + v on ``basis``."""
    if not v.is_real(1e-12):
        raise InvalidInputError("the potential must be real-valued")
    h = multiplication_matrix(v, basis)
    p = basis.momenta(q)
    h[np.diag_indices(basis.dim)] += 0.5 * np.einsum("ij,ij->i", p, p)
    if not np.any(h.imag):
        return np.ascontiguousarray(h.real)
    return h


@dataclass(frozen=True, eq=False)
class BlochSolution:
    q: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray  # columns
    basis: PlaneWaveBasis = field(repr=False)

    @property
    def n_bands(self) -> int:
        return len(self.eigenvalues)


def _hermitian_eigh(h: np.ndarray, n_bands: int | None):
    subset = None
    if n_bands is not None and n_bands < h.shape[0]:
        subset = [0, n_bands - 1]
    try:
        vals, vecs = scipy.linalg.eigh(h, subset_by_index=subset, driver="evr" if subset else "evd")
    except (np.linalg.LinAlgError, ValueError) as exc:
        cond = np.linalg.norm(h, 2) if h.shape[0] <= 2000 else float("nan")
        raise NumericalError(f"Hermitian eigensolver failed (dim {h.shape[0]}, operator norm {cond:.3e}): {exc}") from exc
    return vals, vecs


def solve_bloch(q, v: FourierField, basis: PlaneWaveBasis, n_bands: int | None = None) -> BlochSolution:
    if n_bands is not None and not 1 <= n_bands <= basis.dim:
        raise InvalidParameterError(f"n_bands must lie in [1, {basis.dim}]")
    h = assemble_h_q(q, v, basis)
    vals, vecs = _hermitian_eigh(h, n_bands)
    q = np.array(q, dtype=float)
    return BlochSolution(q, vals, vecs.astype(complex), basis)


def grad_K(w, basis: PlaneWaveBasis, q=None) -> np.ndarray:
    """Components of (-i grad + q) applied to coefficient vectors (q defaults to K).

    Returns shape (2,) + w.shape.
    """
    q = basis.lattice.K if q is None else q
    p = basis.momenta(q)
    w = np.asarray(w)
    return np.stack([p[:, 0] * w, p[:, 1] * w])


def directional_grad(w, basis: PlaneWaveBasis, direction) -> np.ndarray:
    """(unit direction) . (-i grad_K) applied to w."""
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    p = basis.momenta(basis.lattice.K) @ d
    return p * np.asarray(w)


def rotate_coefficients(w, basis: PlaneWaveBasis) -> tuple[np.ndarray, float]:
    """Coefficients at K of the rotated Bloch function, plus the dropped weight."""
    lat = basis.lattice
    target = basis.modes @ lat.rotation_index.T + lat.rotation_shift
    return _permute(w, basis, target)


def mirror_coefficients(w, basis: PlaneWaveBasis) -> tuple[np.ndarray, float]:
    lat = basis.lattice
    target = basis.modes @ lat.mirror_index.T + lat.mirror_shift
    return _permute(w, basis, target)


def _permute(w, basis, target):
    idx = basis.index(target)
    ok = idx >= 0
    w = np.asarray(w)
    out = np.zeros_like(w, dtype=complex)
    out[..., idx[ok]] = w[..., ok]
    leak = float(np.sum(np.abs(w[..., ~ok]) ** 2))
    return out, leak


def parity_conjugate(w) -> np.ndarray:
    """Periodic part of conj(phi(-x)) for phi = exp(iKx) w: plain conjugation of coefficients."""
    return np.conj(w)


@dataclass(frozen=True, eq=False)
class DiracData:
    m_F: int
    E_F: float
    w1: np.ndarray
    w2: np.ndarray
    v_F: float
    eta: int
    full_solution_at_K: BlochSolution = field(repr=False)
    potential: FourierField = field(repr=False)
    diagnostics: dict = field(default_factory=dict, repr=False)

    @property
    def basis(self) -> PlaneWaveBasis:
        return self.full_solution_at_K.basis

    @property
    def lattice(self) -> Lattice:
        return self.basis.lattice

    @property
    def pair(self) -> np.ndarray:
        return np.stack([self.w1, self.w2])

    @property
    def energies(self) -> np.ndarray:
        return self.full_solution_at_K.eigenvalues

    def band_vector(self, band: int) -> np.ndarray:
        """Eigenvector of the 1-based band index at K."""
        return self.full_solution_at_K.eigenvectors[:, band - 1]

    def h_K(self) -> np.ndarray:
        return assemble_h_q(self.lattice.K, self.potential, self.basis)

    def apply_h_K(self, w) -> np.ndarray:
        """h_K applied through the stored spectral decomposition."""
        sol = self.full_solution_at_K
        u = sol.eigenvectors
        return (np.asarray(w) @ np.conj(u)) * sol.eigenvalues @ u.T


def _rotation_block(pair: np.ndarray, basis):
    rotated, leak = rotate_coefficients(pair, basis)
    return np.conj(pair) @ rotated.T, leak, rotated


def detect_dirac(
    v: FourierField,
    lattice: Lattice,
    basis: PlaneWaveBasis,
    m_F: int = 1,
    tol_deg: float | None = None,
    tol_sym: float = 1e-6,
) -> DiracData:
    """Find the Fermi pair at K and fix its gauge.

    Steps: diagonalize the rotation on the degenerate pair, label the
    omega state phi1, define phi2 as the parity-conjugate of phi1, and
    rotate the phase of phi1 so the velocity matrix element is real positive.
    """
    if m_F < 1:
        raise InvalidParameterError("m_F is 1-based")
    if basis.dim < m_F + 2:
        raise InvalidParameterError("basis too small for the requested bands")
    sol = solve_bloch(lattice.K, v, basis)
    E = sol.eigenvalues
    i1, i2 = m_F - 1, m_F
    raw = sol.eigenvectors[:, [i1, i2]].T
    E_F = 0.5 * (E[i1] + E[i2])
    if tol_deg is None:
        tol_deg = 1e-8 * (1 + abs(E_F))
    diag = {"degeneracy_gap": float(abs(E[i2] - E[i1])), "tol_deg": float(tol_deg)}

    # (i)-(ii): rotation restricted to the pair
    C, leak, _ = _rotation_block(raw, basis)
    diag["rotation_leakage"] = leak
    if leak > LEAKAGE_LIMIT:
        raise SymmetryViolationError(
            f"rotation pushes weight {leak:.2e} outside the cutoff window; increase the micro cutoff"
        )
    unitarity = float(np.max(np.abs(C.conj().T @ C - np.eye(2))))
    diag["rotation_unitarity"] = unitarity
    mu, vecs = np.linalg.eig(C)
    targets = np.array([OMEGA, np.conj(OMEGA)])
    order = [int(np.argmin(np.abs(mu - t))) for t in targets]
    spec_err = max(abs(mu[order[0]] - OMEGA), abs(mu[order[1]] - np.conj(OMEGA)))
    diag["rotation_spectrum_error"] = float(spec_err)
    if unitarity > tol_sym or order[0] == order[1] or spec_err > tol_sym:
        raise SymmetryViolationError(
            f"rotation on the pair at band {m_F} is not unitary with spectrum {{w, conj(w)}}: "
            f"eigenvalues {np.round(mu, 6)}, unitarity defect {unitarity:.2e}"
        )
    if diag["degeneracy_gap"] > tol_deg:
        raise NoDiracPointError(
            f"bands {m_F} and {m_F + 1} split by {diag['degeneracy_gap']:.3e} > {tol_deg:.3e} at K"
        )
    if i2 + 1 < len(E) and E[i2 + 1] - E_F < GAP_MARGIN:
        raise NoDiracPointError(f"upper gap {E[i2 + 1] - E_F:.3e} below margin {GAP_MARGIN}")
    if i1 >= 1 and E_F - E[i1 - 1] < GAP_MARGIN:
        raise NoDiracPointError(f"lower gap {E_F - E[i1 - 1]:.3e} below margin {GAP_MARGIN}")

    c = vecs[:, order[0]]
    w1 = c @ raw
    w1 /= np.linalg.norm(w1)
    # (iii): the partner state is the parity-conjugate
    w2 = parity_conjugate(w1)

    # (iv): phase so that <w1, (-i grad_K) w2> = v_F (1, -i)
    g = np.conj(w1) @ grad_K(w2, basis).T
    vel = 0.5 * (g[0] + 1j * g[1])
    if abs(vel) < 1e-10:
        raise DegenerateConeError(f"Fermi velocity {abs(vel):.3e} vanishes")
    phase = np.exp(0.5j * np.angle(vel))
    w1 = w1 * phase
    # deterministic sign: the largest coefficient of w1 has positive real part
    j = int(np.argmax(np.abs(w1)))
    if w1[j].real < 0:
        w1 = -w1
    w2 = parity_conjugate(w1)
    g = np.conj(w1) @ grad_K(w2, basis).T
    v_F = float((0.5 * (g[0] + 1j * g[1])).real)

    mirrored, _ = mirror_coefficients(w1, basis)
    ov = complex(np.vdot(w2, mirrored))
    eta = 0 if ov.real > 0 else 1
    diag["mirror_residual"] = float(np.linalg.norm(mirrored - (-1) ** eta * w2))
    diag["velocity_residual"] = float(np.max(np.abs(g - v_F * np.array([1, -1j]))))
    for a, w in ((1, w1), (2, w2)):
        d = np.conj(w) @ grad_K(w, basis).T
        diag[f"self_velocity_{a}"] = float(np.max(np.abs(d)))
    image = basis.index(basis.modes @ lattice.rotation_index.T + lattice.rotation_shift)
    image = image[image >= 0]
    for a, w in ((1, w1), (2, w2)):
        rotated, _ = rotate_coefficients(w, basis)
        # compare only where the rotated window overlaps the window itself
        diag[f"rotation_residual_{a}"] = float(np.linalg.norm((rotated - OMEGA**a * w)[image]))
    w1.setflags(write=False)
    w2.setflags(write=False)
    return DiracData(m_F, float(E_F), w1, w2, v_F, eta, sol, v, diag)


def apply_resolvent(d: DiracData, b, power: int = 1) -> np.ndarray:
    """Pseudo-inverse of (E_F - h_K) on the complement of the Fermi pair, to a power."""
    if power not in (1, 2):
        raise InvalidParameterError("power must be 1 or 2")
    sol = d.full_solution_at_K
    u = sol.eigenvectors
    denom = d.E_F - sol.eigenvalues
    factor = np.zeros_like(denom)
    keep = np.ones(len(denom), dtype=bool)
    keep[[d.m_F - 1, d.m_F]] = False
    factor[keep] = 1.0 / denom[keep] ** power
    b = np.asarray(b)
    coeff = b @ np.conj(u)
    return (coeff * factor) @ u.T


def fermi_projector_apply(d: DiracData, b) -> np.ndarray:
    """Orthogonal projection onto span(w1, w2)."""
    pair = d.pair
    b = np.asarray(b)
    return (b @ np.conj(pair).T) @ pair
