"""Perturbation theory around the Dirac point and the reduced families built from it.

Notation in code: ``grad`` is (-i grad_K), ``res`` is the pseudo-inverse of
(E_F - h_K) and ``proj`` the projector onto the Fermi pair.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

import numpy as np

from .errors import DependentFamilyError, InvalidParameterError, SpectralGapError
from .microsolver import (
    DiracData,
    apply_resolvent,
    directional_grad,
    fermi_projector_apply,
    grad_K,
    solve_bloch,
)

FAMILY_KINDS = ("F0", "F1k", "F1", "F2k", "F2", "Fn")
DIRECTIONAL_KINDS = ("F1k", "F2k")
GRAM_RATIO = 1e-10


def _unit(direction) -> np.ndarray:
    if direction is None:
        raise InvalidParameterError("this family needs a direction")
    d = np.asarray(direction, dtype=float)
    nrm = np.linalg.norm(d)
    if not np.isfinite(nrm) or nrm == 0:
        raise InvalidParameterError("direction must be a nonzero momentum")
    return d / nrm


@dataclass(frozen=True, eq=False)
class ReducedFamily:
    kind: str
    vectors: np.ndarray  # (M, dim), rows are psi_1..psi_M
    direction: np.ndarray | None = None
    n: int | None = None
    labels: tuple = field(default=(), repr=False)

    @property
    def M(self) -> int:
        return self.vectors.shape[0]

    @property
    def tag(self) -> str:
        return f"F^{self.n}" if self.kind == "Fn" else self.kind


def parse_family_tag(tag: str) -> tuple[str, int | None]:
    """'F1k' -> ('F1k', None); 'F^6' -> ('Fn', 6)."""
    t = tag.strip()
    if t in ("F0", "F1k", "F1", "F2k", "F2"):
        return t, None
    if t.startswith("F^") and t[2:].isdigit() and int(t[2:]) >= 2:
        return "Fn", int(t[2:])
    raise InvalidParameterError(f"unknown family tag {tag!r} (excited families are written F^n)")


def _real_phase(u: np.ndarray) -> np.ndarray:
    """Phase making a parity-conjugation invariant vector real, sign fixed by its largest entry."""
    s = np.sum(u * u)
    if abs(s) > 0.5:
        u = u * np.exp(-0.5j * np.angle(s))
    else:
        j = int(np.argmax(np.abs(u)))
        u = u * np.exp(-1j * np.angle(u[j]))
    j = int(np.argmax(np.abs(u)))
    return -u if u[j].real < 0 else u


def _check_gram(vectors: np.ndarray, kind: str) -> None:
    extra = vectors[2:]
    if len(extra) == 0:
        return
    gram = np.conj(extra) @ extra.T
    ev = np.linalg.eigvalsh(gram)
    if ev[0] < GRAM_RATIO * ev[-1]:
        raise DependentFamilyError(
            f"family {kind} is numerically dependent: smallest Gram eigenvalue {ev[0]:.3e}, largest {ev[-1]:.3e}"
        )


def build_family(kind: str, d: DiracData, direction=None, n: int | None = None) -> ReducedFamily:
    if kind not in FAMILY_KINDS:
        raise InvalidParameterError(f"unknown family kind {kind!r}")
    basis = d.basis
    w = [d.w1, d.w2]
    res = lambda x, p=1: apply_resolvent(d, x, p)
    unit = None
    labels = ["w1", "w2"]
    if kind == "F0":
        vecs = list(w)
    elif kind in DIRECTIONAL_KINDS:
        unit = _unit(direction)
        dk = lambda x: directional_grad(x, basis, unit)
        first = [res(dk(wa)) for wa in w]
        vecs = w + first
        labels += ["R Dk w1", "R Dk w2"]
        if kind == "F2k":
            for a, wa in enumerate(w):
                pdw = fermi_projector_apply(d, dk(wa))
                vecs.append(res(dk(first[a])) - res(dk(pdw), 2))
                labels.append(f"(R Dk)^2 w{a + 1} - R^2 Dk P Dk w{a + 1}")
    elif kind in ("F1", "F2"):
        grads = [grad_K(wa, basis) for wa in w]
        r1 = {(a, b): res(grads[a][b]) for a, b in product(range(2), range(2))}
        vecs = list(w)
        for a, b in product(range(2), range(2)):
            vecs.append(r1[a, b])
            labels.append(f"R d{b + 1} w{a + 1}")
        if kind == "F2":
            for a, b in product(range(2), range(2)):
                vecs.append(res(grads[a][b], 2))
                labels.append(f"R^2 d{b + 1} w{a + 1}")
            for a, b, c in product(range(2), range(2), range(2)):
                vecs.append(res(grad_K(r1[a, c], basis)[b]))
                labels.append(f"R d{b + 1} R d{c + 1} w{a + 1}")
    else:
        if n is None or int(n) < 2:
            raise InvalidParameterError("Fn needs n >= 2")
        n = int(n)
        top = d.m_F + n - 1
        E = d.energies
        if top > len(E):
            raise InvalidParameterError(f"only {len(E)} bands available")
        if n >= 3 and E[d.m_F + 1] - d.E_F < 1e-3:
            raise SpectralGapError("third band too close to the Fermi level")
        tol = d.diagnostics.get("tol_deg", 1e-8 * (1 + abs(d.E_F)))
        if top < len(E) and n >= 3 and abs(E[top] - E[top - 1]) <= tol:
            raise SpectralGapError(f"F{n} would split a degenerate level at band {top}")
        vecs = list(w)
        for band in range(d.m_F + 2, top + 1):
            vecs.append(_real_phase(d.band_vector(band)))
            labels.append(f"u{band}")
    vectors = np.array(vecs, dtype=complex)
    _check_gram(vectors, kind)
    vectors.setflags(write=False)
    return ReducedFamily(kind, vectors, unit, n if kind == "Fn" else None, tuple(labels))


@dataclass(frozen=True, eq=False)
class RSExpansion:
    direction: np.ndarray
    U0_plus: np.ndarray
    U0_minus: np.ndarray
    U1_plus: np.ndarray
    U1_minus: np.ndarray
    E1_plus: float
    E1_minus: float
    E2_plus: float
    E2_minus: float

    def U0(self, eta: int) -> np.ndarray:
        return self.U0_plus if eta > 0 else self.U0_minus

    def U1(self, eta: int) -> np.ndarray:
        return self.U1_plus if eta > 0 else self.U1_minus

    def energy(self, eta: int, s: float, E_F: float = 0.0) -> float:
        """Second-order Taylor polynomial of the band along ``direction``."""
        e1 = self.E1_plus if eta > 0 else self.E1_minus
        e2 = self.E2_plus if eta > 0 else self.E2_minus
        return E_F + s * e1 + s * s * e2


def rs_expansion(d: DiracData, direction) -> RSExpansion:
    """Degenerate Rayleigh-Schroedinger terms in intermediate normalization, for |k| = 1."""
    unit = _unit(direction)
    basis = d.basis
    kc_bar = unit[0] - 1j * unit[1]
    dk = lambda x: directional_grad(x, basis, unit)
    u0 = {eta: (eta * kc_bar * d.w1 + d.w2) / np.sqrt(2) for eta in (1, -1)}
    rdu = {eta: apply_resolvent(d, dk(u0[eta])) for eta in (1, -1)}
    u1, e2 = {}, {}
    for eta in (1, -1):
        coupling = np.vdot(dk(u0[-eta]), rdu[eta])  # <U0_-eta, Dk R Dk U0_eta>
        u1[eta] = rdu[eta] + eta / (2 * d.v_F) * coupling * u0[-eta]
        e2[eta] = float((0.5 + np.vdot(dk(u0[eta]), rdu[eta])).real)
    return RSExpansion(
        unit, u0[1], u0[-1], u1[1], u1[-1], d.v_F, -d.v_F, e2[1], e2[-1]
    )


@dataclass(frozen=True)
class TaylorResiduals:
    s: np.ndarray
    energy: np.ndarray  # max over branches of |E(s) - second-order polynomial|
    vector: np.ndarray  # max over branches of |u(s) - (U0 + s U1)| after phase alignment


def taylor_residuals(d: DiracData, direction, s_values) -> TaylorResiduals:
    """Compare re-solved bands at K + s k with the expansion, branches matched by overlap."""
    exp = rs_expansion(d, direction)
    s_values = np.asarray(s_values, dtype=float)
    e_res, v_res = [], []
    for s in s_values:
        sol = solve_bloch(d.lattice.K + s * exp.direction, d.potential, d.basis, n_bands=d.m_F + 1)
        vecs = sol.eigenvectors[:, d.m_F - 1 : d.m_F + 1]
        vals = sol.eigenvalues[d.m_F - 1 : d.m_F + 1]
        worst_e = worst_v = 0.0
        for eta in (1, -1):
            u0 = exp.U0(eta)
            ov = np.conj(vecs).T @ u0
            j = int(np.argmax(np.abs(ov)))
            u = vecs[:, j] * (ov[j] / abs(ov[j]))
            worst_e = max(worst_e, abs(vals[j] - exp.energy(eta, s, d.E_F)))
            worst_v = max(worst_v, float(np.linalg.norm(u - (u0 + s * exp.U1(eta)))))
        e_res.append(worst_e)
        v_res.append(worst_v)
    return TaylorResiduals(s_values, np.array(e_res), np.array(v_res))


def _gamma_terms(d: DiracData, k: np.ndarray, b: np.ndarray, order: int) -> np.ndarray:
    basis = d.basis
    a1 = lambda x: grad_K(x, basis).T @ k  # k . (-i grad_K)
    a2 = 0.5 * float(k @ k)
    R = lambda x: apply_resolvent(d, x, 1)
    R2 = lambda x: apply_resolvent(d, x, 2)
    P = lambda x: fermi_projector_apply(d, x)
    if order == 1:
        return R(a1(P(b))) + P(a1(R(b)))
    return (
        R(a1(P(a1(R(b)))))
        - P(a1(R2(a1(P(b)))))
        + a2 * R(P(b))
        + a2 * P(R(b))
        + R(a1(R(a1(P(b)))))
        + P(a1(R(a1(R(b)))))
        - R2(a1(P(a1(P(b)))))
        - P(a1(P(a1(R2(b)))))
    )


def dm_gamma(d: DiracData, direction, order: int, a: int) -> np.ndarray:
    """Order-n derivative of the Fermi-pair spectral projector along k, applied to w_a.

    ``direction`` is the full momentum k (its length enters the result).
    """
    if order not in (1, 2):
        raise InvalidParameterError("order must be 1 or 2")
    if a not in (1, 2):
        raise InvalidParameterError("a must be 1 or 2")
    k = np.asarray(direction, dtype=float)
    if not np.any(k):
        raise InvalidParameterError("direction must be nonzero")
    w = d.w1 if a == 1 else d.w2
    return _gamma_terms(d, k, w, order)


def span_projector(vectors) -> np.ndarray:
    """Orthogonal projector onto the row span (via SVD with a relative rank cut)."""
    v = np.asarray(vectors)
    u, s, _ = np.linalg.svd(v.T, full_matrices=False)
    rank = int(np.sum(s > 1e-12 * s[0]))
    q = u[:, :rank]
    return q @ q.conj().T


def principal_angles(a, b) -> np.ndarray:
    """Principal angles (radians) between the row spans of two vector sets.

    Computed from sines so that tiny angles keep full relative accuracy.
    """
    qa = np.linalg.qr(np.asarray(a).T)[0]
    qb = np.linalg.qr(np.asarray(b).T)[0]
    rest = qb - qa @ (qa.conj().T @ qb)
    s = np.linalg.svd(rest, compute_uv=False)
    return np.sort(np.arcsin(np.clip(s, 0.0, 1.0)))


__all__ = [
    "ReducedFamily",
    "RSExpansion",
    "build_family",
    "rs_expansion",
    "taylor_residuals",
    "TaylorResiduals",
    "dm_gamma",
    "parse_family_tag",
    "principal_angles",
    "span_projector",
]
