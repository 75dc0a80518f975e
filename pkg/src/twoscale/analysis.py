"""Comparison of the two-scale effective models against the exact superlattice operator.

Effective envelopes are lifted to the fine plane-wave window by the
reconstruction map and compared there with exact eigenvectors.  Every
distance is measured on the fine window.
"""
from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .effective import EffectiveModel, assemble_effective, schur_operator, solve_effective
from .errors import InvalidInputError, InvalidParameterError, ResolutionError
from .exactsolver import ExactOperatorSpec, apply_exact, folded_reference, solve_exact
from .fourier import FourierField, PlaneWaveBasis
from .lattice import KPath
from .perturbation import ReducedFamily

MATCH_THRESHOLD = 0.1
CONTINUITY_THRESHOLD = 0.5


# --------------------------------------------------------------------------- parallel helper


def parallel_map(fn: Callable, items: Sequence, workers: int = 1) -> list:
    """Ordered map over independent tasks.

    BLAS is pinned to one thread in every mode so that floating-point
    reductions do not depend on the worker count.
    """
    items = list(items)
    with threadpool_limits(limits=1):
        if workers <= 1 or len(items) <= 1:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(max_workers=int(workers)) as pool:
            return list(pool.map(fn, items))


# --------------------------------------------------------------------------- reconstruction


def reconstruct(
    family: ReducedFamily,
    envelope,
    inv_epsilon: int,
    fine_basis: PlaneWaveBasis,
    macro_basis: PlaneWaveBasis,
    micro_basis: PlaneWaveBasis,
    normalize: bool = False,
) -> np.ndarray:
    """Fine coefficients of sum_j alpha_j(x) psi_j(x / eps).

    ``envelope`` has shape (M, macro dim) or is the flat component-major vector.
    """
    alpha = np.asarray(envelope, dtype=complex).reshape(family.M, macro_basis.dim)
    need = inv_epsilon * micro_basis.cutoff + macro_basis.cutoff
    if fine_basis.cutoff < need:
        raise ResolutionError(f"fine cutoff {fine_basis.cutoff} below the product bound {need}")
    prod = alpha.T @ family.vectors  # (macro mode, micro mode)
    targets = (
        macro_basis.modes[:, None, :] + inv_epsilon * micro_basis.modes[None, :, :]
    ).reshape(-1, 2)
    out = np.zeros(fine_basis.dim, dtype=complex)
    np.add.at(out, fine_basis.index(targets), prod.reshape(-1))
    out /= np.sqrt(fine_basis.lattice.cell_area)
    if normalize:
        nrm = np.linalg.norm(out)
        if nrm == 0:
            raise InvalidInputError("cannot normalize a vanishing reconstruction")
        out /= nrm
    return out


def _unit_vector(x, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=complex)
    nrm = np.linalg.norm(x)
    if not nrm > 0:
        raise InvalidInputError(f"{name} is the zero vector")
    return x / nrm


def eigvec_distance(psi, phi) -> float:
    """Relative distance between two rays after unit normalization and phase alignment."""
    psi = _unit_vector(psi, "psi")
    phi = _unit_vector(phi, "phi")
    ov = np.vdot(phi, psi)
    phase = ov / abs(ov) if abs(ov) > 0 else 1.0
    return float(min(np.linalg.norm(psi - phase * phi), 2.0))


def subspace_distance(psi, basis_vectors) -> float:
    """Distance from psi to the closest ray in the span of orthonormal columns."""
    psi = _unit_vector(psi, "psi")
    q = np.atleast_2d(np.asarray(basis_vectors))
    if q.shape[0] != psi.shape[0]:
        q = q.T
    proj = q @ (np.conj(q).T @ psi)
    if np.linalg.norm(proj) == 0:
        return float(np.sqrt(2.0))
    return eigvec_distance(psi, proj)


# --------------------------------------------------------------------------- spectral sources


@dataclass(frozen=True, eq=False)
class SpectralSample:
    """Energies (ascending) with optional eigenvector columns and overlap metric."""

    energies: np.ndarray
    vectors: np.ndarray | None = None
    metric: np.ndarray | None = None

    def overlaps(self, other: "SpectralSample") -> np.ndarray:
        """|<self_i, other_j>| in the metric of ``other``."""
        right = other.vectors if other.metric is None else other.metric @ other.vectors
        return np.abs(np.conj(self.vectors).T @ right)


Source = Callable[[np.ndarray], SpectralSample]


def exact_source(
    v_micro: FourierField,
    E_F: float,
    inv_epsilon: int,
    fine_cutoff: int,
    V_macro: FourierField | None = None,
    n_states: int = 24,
    method: str = "auto",
) -> Source:
    """Exact eigenpairs nearest zero, energies rescaled by 1/eps."""

    def solve(k):
        spec = ExactOperatorSpec(inv_epsilon, k, v_micro, V_macro, fine_cutoff, E_F)
        sol = solve_exact(spec, n_nearest=n_states, method=method)
        return SpectralSample(sol.macro_energies, sol.vectors)

    return solve


def effective_source(model: EffectiveModel) -> Source:
    def solve(k):
        sol = solve_effective(model, k)
        _, mass = assemble_effective(model, k)
        return SpectralSample(sol.energies, sol.vectors, mass)

    return solve


def schur_source(model: EffectiveModel) -> Source:
    def solve(k):
        op = schur_operator(model, k)
        vals, vecs = np.linalg.eigh(op.hamiltonian)
        return SpectralSample(vals, vecs)

    return solve


def folded_source(
    v_micro: FourierField, E_F: float, inv_epsilon: int, micro_cutoff: int, n_bands: int = 4, n_states: int | None = None
) -> Source:
    """Folded micro spectra (no vectors), rescaled by 1/eps like the exact source."""

    def solve(k):
        spec = ExactOperatorSpec(inv_epsilon, k, v_micro, None, inv_epsilon * micro_cutoff + inv_epsilon // 2, E_F)
        vals = folded_reference(spec, micro_cutoff, n_bands=n_bands)
        if n_states is not None:
            sel = np.argsort(np.abs(vals), kind="stable")[:n_states]
            vals = np.sort(vals[sel])
        return SpectralSample(vals * inv_epsilon)

    return solve


# --------------------------------------------------------------------------- band diagrams


@dataclass(frozen=True, eq=False)
class BandDiagram:
    path: KPath
    source: str
    energies: np.ndarray  # (samples, bands), sorted per sample
    tracked: np.ndarray  # (samples, bands), overlap-continued
    tracking: str  # "overlap" or "sorted"
    low_overlap: tuple = ()  # (sample, band) pairs below the continuity threshold

    @property
    def n_bands(self) -> int:
        return self.energies.shape[1]


def greedy_match(overlap: np.ndarray) -> np.ndarray:
    """Assignment previous -> current by repeatedly taking the largest remaining overlap."""
    ov = np.array(overlap, dtype=float)
    n_prev, n_cur = ov.shape
    assign = np.full(n_prev, -1)
    for _ in range(min(n_prev, n_cur)):
        i, j = np.unravel_index(np.argmax(ov), ov.shape)
        assign[i] = j
        ov[i, :] = -1.0
        ov[:, j] = -1.0
    return assign


def band_diagram(source: Source, path: KPath, tag: str, workers: int = 1, n_bands: int | None = None) -> BandDiagram:
    """Sorted and overlap-tracked bands of one source along a path."""
    samples = path.samples

    def run(i):
        try:
            return source(samples[i])
        except Exception as exc:  # report which sample failed
            raise type(exc)(f"sample {i} at k={samples[i].tolist()}: {exc}") from exc

    results = parallel_map(run, range(len(samples)), workers)
    counts = {r.energies.size for r in results}
    if len(counts) != 1:
        raise InvalidInputError(f"source {tag} returned varying band counts {sorted(counts)}")
    energies = np.array([r.energies for r in results])
    if n_bands is not None:
        energies = energies[:, :n_bands]
    nb = energies.shape[1]
    if any(r.vectors is None for r in results):
        return BandDiagram(path, tag, energies, energies.copy(), "sorted")
    tracked = np.empty_like(energies)
    tracked[0] = energies[0]
    order = np.arange(nb)
    flags = []
    for i in range(1, len(results)):
        prev = SpectralSample(results[i - 1].energies, results[i - 1].vectors[:, order], results[i - 1].metric)
        ov = prev.overlaps(results[i])[:, :nb]
        assign = greedy_match(ov)
        for b in range(nb):
            if ov[b, assign[b]] < CONTINUITY_THRESHOLD:
                flags.append((i, b))
        order = assign
        tracked[i] = results[i].energies[order]
    return BandDiagram(path, tag, energies, tracked, "overlap", tuple(flags))


# --------------------------------------------------------------------------- Dirac-branch matching


def dirac_weight(model: EffectiveModel, vectors: np.ndarray) -> np.ndarray:
    """Weight of each effective eigenvector on the Fermi pair at macro mode zero."""
    n = model.macro_basis.dim
    zero = int(model.macro_basis.index((0, 0)))
    rows = [zero, n + zero]  # components w1 and w2
    return np.sum(np.abs(vectors[rows, :]) ** 2, axis=0)


class DiracPairTracker:
    """Selects the effective Dirac pair, continuing it by subspace overlap."""

    def __init__(self, model: EffectiveModel):
        self.model = model
        self._prev: np.ndarray | None = None

    def select(self, sample: SpectralSample) -> np.ndarray:
        if self._prev is None:
            score = dirac_weight(self.model, sample.vectors)
        else:
            prev = SpectralSample(sample.energies, self._prev, sample.metric)
            score = np.sum(prev.overlaps(sample) ** 2, axis=0)
        pick = np.sort(np.argsort(-score, kind="stable")[:2])
        self._prev = sample.vectors[:, pick]
        return pick


@dataclass(frozen=True, eq=False)
class MatchResult:
    effective_energy: float
    exact_energy: float
    overlap: float
    distance: float

    @property
    def delta(self) -> float:
        return abs(self.effective_energy - self.exact_energy)


def match_to_exact(
    lifted: np.ndarray, energy: float, exact: SpectralSample, cluster_tol: float = 1e-7
) -> MatchResult:
    """Match one reconstructed state to the exact state of maximal overlap."""
    lifted = _unit_vector(lifted, "reconstruction")
    ov = np.abs(np.conj(exact.vectors).T @ lifted)
    j = int(np.argmax(ov))
    e = exact.energies
    cluster = np.nonzero(np.abs(e - e[j]) <= cluster_tol * max(1.0, abs(e[j])))[0]
    dist = subspace_distance(lifted, exact.vectors[:, cluster])
    return MatchResult(float(energy), float(e[j]), float(ov[j]), dist)


@dataclass(frozen=True, eq=False)
class BranchPoint:
    index: int
    k: np.ndarray
    matches: tuple  # one MatchResult per effective Dirac state

    @property
    def overlap(self) -> float:
        return min(m.overlap for m in self.matches)

    @property
    def delta(self) -> float:
        return max(m.delta for m in self.matches)

    @property
    def distance(self) -> float:
        return max(m.distance for m in self.matches)

    @property
    def matched(self) -> bool:
        return self.overlap >= MATCH_THRESHOLD


@dataclass(frozen=True, eq=False)
class BranchComparison:
    points: tuple
    label: str = ""

    @property
    def failures(self) -> list:
        return [p.index for p in self.points if not p.matched]

    def _good(self):
        return [p for p in self.points if p.matched]

    @property
    def mean_delta(self) -> float:
        good = self._good()
        return float(np.mean([m.delta for p in good for m in p.matches])) if good else float("nan")

    @property
    def max_delta(self) -> float:
        good = self._good()
        return float(max(p.delta for p in good)) if good else float("nan")

    @property
    def mean_distance(self) -> float:
        good = self._good()
        return float(np.mean([p.distance for p in good])) if good else float("nan")


@dataclass(frozen=True)
class ExactSetup:
    """Everything needed to build exact operators for one superlattice scale."""

    v_micro: FourierField
    E_F: float
    inv_epsilon: int
    fine_cutoff: int
    n_states: int = 24
    method: str = "auto"

    def source(self, V_macro: FourierField | None = None) -> Source:
        return exact_source(self.v_micro, self.E_F, self.inv_epsilon, self.fine_cutoff, V_macro, self.n_states, self.method)


def compare_dirac_branch(
    models: dict,
    momenta: Sequence,
    setup: ExactSetup,
    micro_basis: PlaneWaveBasis,
    exact_V: Sequence | FourierField | None = None,
    workers: int = 1,
) -> dict:
    """Match effective Dirac states to exact states at every momentum.

    ``models`` maps a label to an EffectiveModel, or to a sequence of models
    (one per point, used by the potential sweep).  ``exact_V`` is a single
    macro potential or one per point.  Effective pairs are continued along the
    sequence of points; exact solves run in parallel and their eigenvectors
    are discarded after matching.
    """
    momenta = [np.asarray(k, dtype=float) for k in momenta]
    n_pts = len(momenta)
    Vs = list(exact_V) if isinstance(exact_V, (list, tuple)) else [exact_V] * n_pts
    per_label = {}
    for label, mdl in models.items():
        seq = list(mdl) if isinstance(mdl, (list, tuple)) else [mdl] * n_pts
        tracker = DiracPairTracker(seq[0])
        states = []
        for m, k in zip(seq, momenta):
            tracker.model = m
            sample = effective_source(m)(k)
            pick = tracker.select(sample)
            states.append((m, sample.energies[pick], sample.vectors[:, pick]))
        per_label[label] = states
    fine = PlaneWaveBasis(setup.v_micro.basis.lattice, setup.fine_cutoff)

    def run(i):
        exact = setup.source(Vs[i])(momenta[i])
        out = {}
        for label, states in per_label.items():
            m, energies, vecs = states[i]
            res = []
            for e, vec in zip(energies, vecs.T):
                lifted = reconstruct(m.family, vec, setup.inv_epsilon, fine, m.macro_basis, micro_basis)
                res.append(match_to_exact(lifted, e, exact))
            out[label] = BranchPoint(i, momenta[i], tuple(res))
        return out

    rows = parallel_map(run, range(n_pts), workers)
    result = {}
    for label in per_label:
        comp = BranchComparison(tuple(r[label] for r in rows), label)
        if comp.failures:
            warnings.warn(
                f"{label}: overlap below {MATCH_THRESHOLD} at points {comp.failures}; excluded from means",
                RuntimeWarning,
                stacklevel=2,
            )
        result[label] = comp
    return result


# --------------------------------------------------------------------------- error curves


@dataclass(frozen=True, eq=False)
class ErrorCurve:
    parameter: str
    kind: str
    grid: np.ndarray
    distances: np.ndarray
    overlaps: np.ndarray
    fit_window: tuple | None = None
    slope: float | None = None


def fit_slope(grid, values, window: tuple) -> float:
    """Least-squares slope of log(values) against log(grid) on the closed window."""
    grid = np.asarray(grid, dtype=float)
    values = np.asarray(values, dtype=float)
    lo, hi = window
    sel = (grid >= lo * (1 - 1e-12)) & (grid <= hi * (1 + 1e-12)) & (values > 0)
    if sel.sum() < 2:
        raise InvalidParameterError(f"fit window {window} holds fewer than two usable points")
    return float(np.polyfit(np.log(grid[sel]), np.log(values[sel]), 1)[0])


def _check_grid(grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0 or np.any(np.diff(grid) <= 0):
        raise InvalidParameterError("sweep grid must be strictly increasing")
    return grid


def _curves(parameter, comparisons, grid, window) -> list:
    curves = []
    for label, comp in comparisons.items():
        # unmatched points were already reported by the comparison; NaN keeps them out of fits
        dist = np.array([p.distance if p.matched else np.nan for p in comp.points])
        ov = np.array([p.overlap for p in comp.points])
        slope = fit_slope(grid, dist, window) if window is not None else None
        curves.append(ErrorCurve(parameter, label, grid, dist, ov, window, slope))
    return curves


def asymptotics_mu(
    models: dict,
    mu_grid,
    setup: ExactSetup,
    micro_basis: PlaneWaveBasis,
    fit_window: tuple = (1e-2, 1e-1),
    workers: int = 1,
) -> list:
    """Eigenvector distances along k = mu K at vanishing macro potential."""
    grid = _check_grid(mu_grid)
    if np.any(grid <= 0):
        raise InvalidParameterError("mu grid must be positive")
    K = setup.v_micro.basis.lattice.K
    comps = compare_dirac_branch(models, [mu * K for mu in grid], setup, micro_basis, None, workers)
    return _curves("mu", comps, grid, fit_window)


def asymptotics_lambda(
    build: Callable[[float], dict],
    lambda_grid,
    setup: ExactSetup,
    micro_basis: PlaneWaveBasis,
    potential: Callable[[float], FourierField | None],
    workers: int = 1,
) -> list:
    """Eigenvector distances at k = 0 while the macro potential strength varies.

    ``build(lam)`` returns {label: EffectiveModel}; ``potential(lam)`` the macro field.
    """
    grid = _check_grid(lambda_grid)
    per_point = [build(lam) for lam in grid]
    labels = list(per_point[0])
    models = {lab: [pp[lab] for pp in per_point] for lab in labels}
    Vs = [potential(lam) for lam in grid]
    zero = np.zeros(2)
    comps = compare_dirac_branch(models, [zero] * len(grid), setup, micro_basis, Vs, workers)
    return _curves("lambda", comps, grid, None)


def schur_consistency(model: EffectiveModel, k, inv_list: Sequence[int]) -> list:
    """|E_schur - E_effective| on the Dirac pair, matched by lifted-envelope overlap, per 1/eps."""
    out = []
    for inv in inv_list:
        m = model.with_epsilon(1.0 / inv)
        eff = effective_source(m)(k)
        pick = DiracPairTracker(m).select(eff)
        op = schur_operator(m, k)
        vals, vecs = np.linalg.eigh(op.hamiltonian)
        lifted = np.column_stack([op.lift @ vecs[:, j] for j in range(vecs.shape[1])])
        gram = np.real(np.sum(np.conj(lifted) * (eff.metric @ lifted), axis=0))
        deltas = []
        for i in pick:
            ov = np.abs(np.conj(lifted).T @ (eff.metric @ eff.vectors[:, i])) / np.sqrt(gram)
            deltas.append(abs(vals[int(np.argmax(ov))] - eff.energies[i]))
        out.append(float(max(deltas)))
    return out


# --------------------------------------------------------------------------- two-scale identities


def weak_convergence_check(
    model: EffectiveModel,
    alpha,
    beta,
    inv_list: Sequence[int],
    k,
    v_micro: FourierField,
    E_F: float,
    micro_basis: PlaneWaveBasis,
) -> list:
    """|eps^-1 |cell| <J alpha, H J beta> - <alpha, H_eff beta>| for each 1/eps.

    Envelopes live on the model's macro window; the macro potential is the model's.
    """
    alpha = np.asarray(alpha, dtype=complex).reshape(-1)
    beta = np.asarray(beta, dtype=complex).reshape(-1)
    area = model.lattice.cell_area
    out = []
    for inv in inv_list:
        m = model.with_epsilon(1.0 / inv)
        H, _ = assemble_effective(m, k)
        rhs = np.vdot(alpha, H @ beta)
        fine_cut = inv * micro_basis.cutoff + m.nu
        spec = ExactOperatorSpec(inv, k, v_micro, m.V, fine_cut, E_F)
        fine = spec.basis
        ja = reconstruct(m.family, alpha, inv, fine, m.macro_basis, micro_basis)
        jb = reconstruct(m.family, beta, inv, fine, m.macro_basis, micro_basis)
        lhs = inv * area * np.vdot(ja, apply_exact(spec, jb))
        out.append(float(abs(lhs - rhs)))
    return out


def oscillation_check(g: FourierField, f: FourierField, inv_list: Sequence[int]) -> list:
    """|integral of g(x) f(x/eps) - (mean-value product)| from the surviving Fourier terms."""
    modes, fvals = f.nonzero_modes()
    out = []
    for inv in inv_list:
        if int(inv) != inv or inv < 1:
            raise InvalidParameterError("1/epsilon must be a positive integer")
        total = 0j
        for n, c in zip(modes, fvals):
            if n[0] == 0 and n[1] == 0:
                continue
            total += g.coefficient(-int(inv) * n) * c
        out.append(float(abs(total)))
    return out
