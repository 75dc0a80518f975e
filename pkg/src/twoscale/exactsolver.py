"""Exact rescaled superlattice operator on the macroscopic cell.

The operator is 1/2 |K + eps (k + n a*)|^2 + (micro potential at fine modes
n = m / eps) + eps V - E_F, written on a fine plane-wave window.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import InvalidParameterError, NumericalError, ResolutionError, ResourceError
from .fourier import FourierField, PlaneWaveBasis, shift_add
from .microsolver import solve_bloch

DENSE_BUDGET = 4000
ZERO_SHIFT = -1e-6
NEAREST_EXTRA = 4


def consistent_fine_cutoff(inv_epsilon: int, micro_cutoff: int) -> int:
    """Fine window whose residue blocks reproduce the micro window (exactly for odd 1/eps)."""
    return int(inv_epsilon) * int(micro_cutoff) + int(inv_epsilon) // 2


def _as_inverse(inv_epsilon) -> int:
    val = float(inv_epsilon)
    if not np.isfinite(val) or val < 1 or abs(val - round(val)) > 1e-12:
        raise InvalidParameterError(f"1/epsilon must be a positive integer, got {inv_epsilon}")
    return int(round(val))


@dataclass(frozen=True, eq=False)
class ExactOperatorSpec:
    inv_epsilon: int
    k: np.ndarray
    v_micro: FourierField
    V_macro: FourierField | None
    fine_cutoff: int
    E_F: float

    def __post_init__(self):
        object.__setattr__(self, "inv_epsilon", _as_inverse(self.inv_epsilon))
        object.__setattr__(self, "k", np.array(self.k, dtype=float))
        need = self.inv_epsilon * max(self.v_micro.support, 0)
        if self.V_macro is not None:
            need = max(need, self.V_macro.support)
        if self.fine_cutoff < need:
            raise ResolutionError(
                f"fine cutoff {self.fine_cutoff} cannot hold potential modes up to {need}"
            )

    @property
    def epsilon(self) -> float:
        return 1.0 / self.inv_epsilon

    @property
    def lattice(self):
        return self.v_micro.basis.lattice

    @property
    def basis(self) -> PlaneWaveBasis:
        return PlaneWaveBasis(self.lattice, self.fine_cutoff)

    @property
    def macro_is_zero(self) -> bool:
        return self.V_macro is None or self.V_macro.is_zero()

    def couplings(self):
        """(fine offset, value) pairs of the potential part, merged when offsets coincide."""
        scale = 1.0 / np.sqrt(self.lattice.cell_area)
        terms: dict = {}
        modes, vals = self.v_micro.nonzero_modes()
        for m, c in zip(modes, vals):
            key = (int(m[0]) * self.inv_epsilon, int(m[1]) * self.inv_epsilon)
            terms[key] = terms.get(key, 0) + c * scale
        if not self.macro_is_zero:
            modes, vals = self.V_macro.nonzero_modes()
            for m, c in zip(modes, vals):
                key = (int(m[0]), int(m[1]))
                terms[key] = terms.get(key, 0) + self.epsilon * c * scale
        return sorted(terms.items())

    def kinetic(self) -> np.ndarray:
        b = self.basis
        p = self.lattice.K[None, :] + self.epsilon * b.momenta(self.k)
        return 0.5 * np.einsum("ij,ij->i", p, p) - self.E_F

    def is_real(self) -> bool:
        return all(abs(np.imag(c)) == 0 for _, c in self.couplings())


def assemble_exact(spec: ExactOperatorSpec) -> sp.csr_matrix:
    """Sparse Hermitian matrix of the exact operator on the fine window."""
    b = spec.basis
    rows = [np.arange(b.dim)]
    cols = [np.arange(b.dim)]
    vals = [spec.kinetic().astype(complex)]
    modes = b.modes
    src = np.arange(b.dim)
    for off, c in spec.couplings():
        tgt = b.index(modes + np.array(off))
        ok = tgt >= 0
        rows.append(tgt[ok])
        cols.append(src[ok])
        vals.append(np.full(int(ok.sum()), c, dtype=complex))
    data = np.concatenate(vals)
    if spec.is_real():
        data = data.real.copy()
    mat = sp.csr_matrix((data, (np.concatenate(rows), np.concatenate(cols))), shape=(b.dim, b.dim))
    mat.sum_duplicates()
    return mat


def apply_exact(spec: ExactOperatorSpec, x) -> np.ndarray:
    """Matrix-free application of the exact operator (works on batches of rows)."""
    b = spec.basis
    x = np.asarray(x, dtype=complex)
    grid = b.as_grid(x)
    out = b.as_grid(spec.kinetic() * x).astype(complex)
    for off, c in spec.couplings():
        shift_add(out, b.cutoff, grid, b.cutoff, off, c)
    return out.reshape(x.shape)


@dataclass(frozen=True, eq=False)
class ExactSolution:
    energies: np.ndarray  # ascending
    vectors: np.ndarray | None  # columns, unit norm
    spec: ExactOperatorSpec = field(repr=False)
    residual: float = 0.0

    @property
    def macro_energies(self) -> np.ndarray:
        """Energies rescaled by 1/eps, the units of the effective model."""
        return self.energies * self.spec.inv_epsilon


def _select_nearest(vals, vecs, n):
    order = np.argsort(np.abs(vals), kind="stable")[:n]
    order = order[np.argsort(vals[order], kind="stable")]
    return vals[order], (None if vecs is None else vecs[:, order])


def _select_window(vals, vecs, lo, hi):
    sel = np.nonzero((vals >= lo) & (vals <= hi))[0]
    sel = sel[np.argsort(vals[sel], kind="stable")]
    return vals[sel], (None if vecs is None else vecs[:, sel])


def _shift_invert(mat, sigma: float, nev: int, lu_cache=None):
    n = mat.shape[0]
    csc = mat.tocsc()
    shifted = csc - sigma * sp.identity(n, dtype=csc.dtype, format="csc")
    shifted.sort_indices()
    try:
        lu = spla.splu(shifted, permc_spec="COLAMD")
    except RuntimeError as exc:
        raise NumericalError(f"sparse factorization failed at shift {sigma}: {exc}") from exc
    op = spla.LinearOperator((n, n), matvec=lu.solve, dtype=csc.dtype)
    v0 = np.ones(n, dtype=csc.dtype) / np.sqrt(n)
    try:
        vals, vecs = spla.eigsh(csc, k=nev, sigma=sigma, OPinv=op, which="LM", v0=v0, tol=0)
    except spla.ArpackError as exc:
        raise NumericalError(f"shift-invert Lanczos failed: {exc}") from exc
    return vals, vecs


def residue_classes(spec: ExactOperatorSpec) -> list[np.ndarray]:
    """Fine-window indices grouped by mode residue modulo 1/eps (lexicographic residues)."""
    inv = spec.inv_epsilon
    r = np.mod(spec.basis.modes, inv)
    key = r[:, 0] * inv + r[:, 1]
    order = np.argsort(key, kind="stable")
    bounds = np.searchsorted(key[order], np.arange(inv * inv + 1))
    return [order[bounds[i]:bounds[i + 1]] for i in range(inv * inv)]


def _extended_ritz(block: np.ndarray, vecs: np.ndarray):
    """Rayleigh-Ritz over computed eigenvectors with the projection in extended precision.

    Nearly degenerate levels close to the Fermi energy are split by far less
    than the block norm, so the rotation inside such a cluster is poorly set by
    a double-precision diagonalization.  The projected matrix has entries of the
    size of the selected energies; forming it in long double and rounding back
    recovers that rotation to near machine precision relative to the splitting.
    """
    if vecs.shape[1] < 2:
        return None
    wide = np.clongdouble if np.iscomplexobj(block) or np.iscomplexobj(vecs) else np.longdouble
    X = vecs.astype(wide)
    G = X.conj().T @ (block.astype(wide) @ X)
    S = X.conj().T @ X
    dt = vecs.dtype
    G = np.asarray(G, dtype=dt)
    w, c = scipy.linalg.eigh(0.5 * (G + G.conj().T), np.asarray(0.5 * (S + S.conj().T), dtype=dt))
    return w, vecs @ c


def _solve_blocks(spec, mat, n_nearest, window):
    """Exact solve exploiting the residue-block structure at vanishing macro potential."""
    if not spec.macro_is_zero:
        raise InvalidParameterError("block solve needs a vanishing macro potential")
    csr = mat.tocsr()
    groups = residue_classes(spec)
    blocks = [csr[g][:, g].toarray() for g in groups]
    parts = []
    if window is not None:
        for b in blocks:
            parts.append(scipy.linalg.eigh(b, subset_by_value=(window[0], window[1])))
    else:
        # first guess: a few states per block more than an even share
        guess = min(n_nearest, 2 + -(-2 * n_nearest // len(blocks)))
        for b in blocks:
            top = min(guess, b.shape[0]) - 1
            parts.append(scipy.linalg.eigh(b, subset_by_index=(0, top)))
        allv = np.concatenate([e for e, _ in parts])
        cut = np.sort(np.abs(allv))[n_nearest - 1]
        for i, (e, u) in enumerate(parts):
            # the lowest eigenvalues might not reach the cut: take the full window instead
            if len(e) < blocks[i].shape[0] and e[-1] < cut:
                parts[i] = scipy.linalg.eigh(blocks[i], subset_by_value=(-np.inf, cut * (1 + 1e-12)))
    owner = np.concatenate([np.full(len(e), i) for i, (e, _) in enumerate(parts)]).astype(int)
    local = np.concatenate([np.arange(len(e)) for e, _ in parts]).astype(int)
    allv = np.concatenate([e for e, _ in parts])
    if n_nearest is not None:
        chosen = np.argsort(np.abs(allv), kind="stable")[:n_nearest]
    else:
        chosen = np.arange(len(allv))
    # refine the kept states of each block together
    for i in np.unique(owner[chosen]):
        keep = np.sort(local[chosen[owner[chosen] == i]])
        e, u = parts[i]
        refined = _extended_ritz(blocks[i], u[:, keep])
        if refined is not None:
            e, u = e.copy(), u.copy()
            e[keep], u[:, keep] = refined
            parts[i] = (e, u)
            allv[np.flatnonzero(owner == i)[keep]] = refined[0]
    chosen = chosen[np.argsort(allv[chosen], kind="stable")]
    vecs = np.zeros((mat.shape[0], len(chosen)), dtype=mat.dtype)
    for col, c in enumerate(chosen):
        vecs[groups[owner[c]], col] = parts[owner[c]][1][:, local[c]]
    return allv[chosen], vecs


def solve_exact(
    spec: ExactOperatorSpec,
    n_nearest: int | None = None,
    window: tuple[float, float] | None = None,
    method: str = "auto",
    dense_budget: int = DENSE_BUDGET,
    want_vectors: bool = True,
) -> ExactSolution:
    """Eigenpairs nearest zero (``n_nearest``) or inside an energy ``window``."""
    if (n_nearest is None) == (window is None):
        raise InvalidParameterError("give exactly one of n_nearest or window")
    mat = assemble_exact(spec)
    dim = mat.shape[0]
    if n_nearest is not None and not 1 <= n_nearest <= dim:
        raise InvalidParameterError(f"n_nearest must lie in [1, {dim}]")
    if method == "auto":
        if dim <= dense_budget:
            method = "dense"
        else:
            method = "blocks" if spec.macro_is_zero else "sparse"
    if method == "blocks":
        vals, vecs = _solve_blocks(spec, mat, n_nearest, window)
    elif method == "dense":
        if dim > dense_budget:
            raise ResourceError(
                f"dense solve of dimension {dim} exceeds the budget {dense_budget}; lower the fine cutoff"
            )
        dense = mat.toarray()
        try:
            vals, vecs = scipy.linalg.eigh(dense)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"dense eigensolver failed: {exc}") from exc
        if n_nearest is not None:
            vals, vecs = _select_nearest(vals, vecs, n_nearest)
        else:
            vals, vecs = _select_window(vals, vecs, *window)
    elif method == "sparse":
        if n_nearest is not None:
            # zero itself is often an exact eigenvalue (Dirac point), so shift just below it
            nev = min(n_nearest + NEAREST_EXTRA, dim - 2)
            vals, vecs = _shift_invert(mat, ZERO_SHIFT, nev)
            vals, vecs = _select_nearest(vals, vecs, n_nearest)
        else:
            lo, hi = window
            mid, half = 0.5 * (lo + hi) + ZERO_SHIFT, 0.5 * (hi - lo)
            nev = 16
            while True:
                nev = min(nev, dim - 2)
                vals, vecs = _shift_invert(mat, mid, nev)
                if np.max(np.abs(vals - mid)) > half or nev >= dim - 2:
                    break
                nev *= 2
            vals, vecs = _select_window(vals, vecs, lo, hi)
    elif method != "blocks":
        raise InvalidParameterError(f"unknown method {method!r}")
    resid = 0.0
    if vecs is not None and vecs.shape[1]:
        resid = float(np.max(np.linalg.norm(mat @ vecs - vecs * vals, axis=0)))
        if resid > 1e-8:
            raise NumericalError(f"exact eigenpair residual {resid:.2e} above 1e-8")
    return ExactSolution(vals, vecs if want_vectors else None, spec, resid)


def residue_momenta(spec: ExactOperatorSpec) -> np.ndarray:
    """Micro momenta K + eps (k + r a*) for residue representatives r in {0..1/eps-1}^2."""
    inv = spec.inv_epsilon
    r = np.arange(inv)
    reps = np.stack(np.meshgrid(r, r, indexing="ij"), axis=-1).reshape(-1, 2)
    return spec.lattice.K[None, :] + spec.epsilon * (spec.k[None, :] + spec.lattice.momentum(reps))


def folded_reference(spec: ExactOperatorSpec, micro_cutoff: int, n_bands: int = 12) -> np.ndarray:
    """Union of micro spectra at all folded momenta, shifted by E_F (V must vanish)."""
    if not spec.macro_is_zero:
        raise InvalidParameterError("the folding identity needs a vanishing macro potential")
    basis = PlaneWaveBasis(spec.lattice, micro_cutoff)
    out = []
    for q in residue_momenta(spec):
        out.append(solve_bloch(q, spec.v_micro, basis, n_bands=n_bands).eigenvalues - spec.E_F)
    return np.sort(np.concatenate(out))


def convergence_check(spec: ExactOperatorSpec, n_nearest: int = 10) -> float:
    """Largest drift of the nearest-zero eigenvalues when the fine cutoff doubles."""
    base = solve_exact(spec, n_nearest=n_nearest, want_vectors=False).energies
    big = ExactOperatorSpec(spec.inv_epsilon, spec.k, spec.v_micro, spec.V_macro, 2 * spec.fine_cutoff, spec.E_F)
    fine = solve_exact(big, n_nearest=n_nearest, want_vectors=False).energies
    return float(np.max(np.abs(base - fine)))
