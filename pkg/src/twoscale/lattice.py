"""Honeycomb lattice geometry, high-symmetry momenta and the standard k-path."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameterError

SQRT3 = np.sqrt(3.0)


def rotation_matrix(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


ROT120 = rotation_matrix(2 * np.pi / 3)
MIRROR_X2 = np.diag([1.0, -1.0])


@dataclass(frozen=True)
class Lattice:
    """Direct and dual honeycomb lattice with the Dirac momentum ``K``.

    The dual vectors form a 60 degree pair so that ``K = -(a1s + a2s)/3``
    is a corner of the first Brillouin zone and the three potential modes
    (1,0), (0,-1), (-1,1) have equal length.
    """

    a0: float
    a1: np.ndarray
    a2: np.ndarray
    a1s: np.ndarray
    a2s: np.ndarray
    K: np.ndarray
    cell_area: float
    # integer action of the 2pi/3 rotation on dual indices: R(m a*) = (rho m) a*
    rotation_index: np.ndarray = field(repr=False)
    # integer coordinates of R K - K
    rotation_shift: np.ndarray = field(repr=False)
    # integer action of the mirror x2 -> -x2 on dual indices
    mirror_index: np.ndarray = field(repr=False)
    mirror_shift: np.ndarray = field(repr=False)

    @property
    def k_dirac(self) -> float:
        return 4 * np.pi / (3 * self.a0)

    @property
    def dual_matrix(self) -> np.ndarray:
        """Columns are a1s and a2s."""
        return np.column_stack([self.a1s, self.a2s])

    @property
    def direct_matrix(self) -> np.ndarray:
        return np.column_stack([self.a1, self.a2])

    def momentum(self, m) -> np.ndarray:
        """Momentum m1*a1s + m2*a2s for integer pairs of shape (..., 2)."""
        m = np.asarray(m, dtype=float)
        return m @ self.dual_matrix.T

    def dual_coordinates(self, q) -> np.ndarray:
        """Real coordinates of a momentum in the (a1s, a2s) basis."""
        return np.linalg.solve(self.dual_matrix, np.asarray(q, dtype=float))

    def in_first_zone(self, q, tol: float = 1e-12) -> bool:
        """True when no dual lattice point is strictly closer to ``q`` than the origin."""
        q = np.asarray(q, dtype=float)
        r = np.arange(-2, 3)
        grid = np.array([(i, j) for i in r for j in r if (i, j) != (0, 0)])
        d0 = np.linalg.norm(q)
        dist = np.linalg.norm(q[None, :] - self.momentum(grid), axis=1)
        return bool(np.all(dist >= d0 - tol * max(1.0, d0)))


def _integer_action(dual: np.ndarray, op: np.ndarray) -> np.ndarray:
    real = np.linalg.solve(dual, op @ dual)
    rounded = np.rint(real)
    if np.max(np.abs(real - rounded)) > 1e-9:
        raise InvalidParameterError("operation does not preserve the dual lattice")
    return rounded.astype(np.int64)


def build_lattice(a0: float) -> Lattice:
    if not np.isfinite(a0) or a0 <= 0:
        raise InvalidParameterError(f"lattice constant must be positive, got {a0}")
    a0 = float(a0)
    kd = 4 * np.pi / (3 * a0)
    a1 = a0 * np.array([0.5, -SQRT3 / 2])
    a2 = a0 * np.array([0.5, SQRT3 / 2])
    a1s = SQRT3 * kd * np.array([SQRT3 / 2, -0.5])
    a2s = SQRT3 * kd * np.array([SQRT3 / 2, 0.5])
    K = -(a1s + a2s) / 3
    area = abs(np.linalg.det(np.column_stack([a1, a2])))
    dual = np.column_stack([a1s, a2s])
    rho = _integer_action(dual, ROT120)
    g0_real = np.linalg.solve(dual, ROT120 @ K - K)
    g0 = np.rint(g0_real)
    if np.max(np.abs(g0_real - g0)) > 1e-9:
        raise InvalidParameterError("rotated Dirac point is not congruent to K")
    mir = _integer_action(dual, MIRROR_X2)
    gm_real = np.linalg.solve(dual, MIRROR_X2 @ K - K)
    gm = np.rint(gm_real)
    for arr in (a1, a2, a1s, a2s, K, rho, g0, mir, gm):
        arr.setflags(write=False)
    return Lattice(
        a0=a0, a1=a1, a2=a2, a1s=a1s, a2s=a2s, K=K, cell_area=float(area),
        rotation_index=rho, rotation_shift=g0.astype(np.int64),
        mirror_index=mir, mirror_shift=gm.astype(np.int64),
    )


def reciprocal(lattice: Lattice, m) -> np.ndarray:
    return lattice.momentum(m)


@dataclass(frozen=True)
class KPath:
    labels: tuple[str, ...]
    anchors: np.ndarray  # (n_anchor, 2)
    samples: np.ndarray  # (n_samples, 2)
    arclength: np.ndarray  # (n_samples,)
    anchor_indices: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.samples)


def kpath_from_anchors(labels, anchors, n_per_segment: int) -> KPath:
    if int(n_per_segment) < 1:
        raise InvalidParameterError("n_per_segment must be at least 1")
    n = int(n_per_segment)
    anchors = np.asarray(anchors, dtype=float)
    pts = [anchors[0]]
    idx = [0]
    for a, b in zip(anchors[:-1], anchors[1:]):
        for j in range(1, n):
            pts.append(a + (b - a) * (j / n))
        pts.append(b.copy())
        idx.append(len(pts) - 1)
    samples = np.array(pts)
    steps = np.linalg.norm(np.diff(samples, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(steps)])
    samples.setflags(write=False)
    arc.setflags(write=False)
    return KPath(tuple(labels), anchors, samples, arc, tuple(idx))


def standard_kpath(lattice: Lattice, n_per_segment: int) -> KPath:
    """Closed triangle kappa -> Gamma -> M -> kappa.

    M is taken literally as -a1s, a full dual vector.
    """
    kappa = lattice.momentum([-2 / 3, 1 / 3])
    gamma = np.zeros(2)
    m_point = -lattice.a1s
    return kpath_from_anchors(
        ("kappa", "Gamma", "M", "kappa"), [kappa, gamma, m_point, kappa], n_per_segment
    )
