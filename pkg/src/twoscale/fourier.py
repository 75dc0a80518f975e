"""Plane-wave representation of periodic functions on the honeycomb cell.

Coefficients follow f(x) = sum_m f_m exp(i (m a*).x) / sqrt(|cell|), so the
L2 inner product over one cell is the plain coefficient dot product.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import DimensionError, InvalidInputError, InvalidParameterError
from .lattice import Lattice

HONEYCOMB_MODES = ((1, 0), (0, -1), (-1, 1))
NG_MODES = ((1, 0), (0, 1), (0, 2))


class PlaneWaveBasis:
    """Integer modes with |m1|, |m2| <= cutoff, ordered lexicographically."""

    def __init__(self, lattice: Lattice, cutoff: int):
        cutoff = int(cutoff)
        if cutoff < 0:
            raise InvalidParameterError("cutoff must be non-negative")
        self.lattice = lattice
        self.cutoff = cutoff

    @property
    def width(self) -> int:
        return 2 * self.cutoff + 1

    @property
    def dim(self) -> int:
        return self.width**2

    def __len__(self) -> int:
        return self.dim

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, PlaneWaveBasis)
            and other.cutoff == self.cutoff
            and other.lattice.a0 == self.lattice.a0
        )

    def __hash__(self) -> int:
        return hash((self.cutoff, self.lattice.a0))

    def __repr__(self) -> str:
        return f"PlaneWaveBasis(cutoff={self.cutoff}, dim={self.dim})"

    @cached_property
    def modes(self) -> np.ndarray:
        r = np.arange(-self.cutoff, self.cutoff + 1)
        m = np.stack(np.meshgrid(r, r, indexing="ij"), axis=-1).reshape(-1, 2)
        m.setflags(write=False)
        return m

    def index(self, m) -> np.ndarray:
        """Linear index of each integer pair, or -1 when outside the window."""
        m = np.asarray(m, dtype=np.int64)
        inside = np.all(np.abs(m) <= self.cutoff, axis=-1)
        idx = (m[..., 0] + self.cutoff) * self.width + (m[..., 1] + self.cutoff)
        return np.where(inside, idx, -1)

    def contains(self, m) -> np.ndarray:
        return np.all(np.abs(np.asarray(m)) <= self.cutoff, axis=-1)

    def momenta(self, q=(0.0, 0.0)) -> np.ndarray:
        """q + m a* for every mode, shape (dim, 2)."""
        return np.asarray(q, dtype=float)[None, :] + self.lattice.momentum(self.modes)

    def as_grid(self, coeffs) -> np.ndarray:
        c = np.asarray(coeffs)
        return c.reshape(c.shape[:-1] + (self.width, self.width))

    def embed(self, coeffs, target: "PlaneWaveBasis") -> np.ndarray:
        """Copy coefficients into a larger window (zero padding)."""
        if target.cutoff < self.cutoff:
            raise DimensionError("target window is smaller than the source window")
        out = np.zeros(np.shape(coeffs)[:-1] + (target.dim,), dtype=np.result_type(coeffs, complex))
        out[..., target.index(self.modes)] = coeffs
        return out


@dataclass(frozen=True, eq=False)
class FourierField:
    basis: PlaneWaveBasis
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=complex)
        if c.shape != (self.basis.dim,):
            raise DimensionError(f"expected {self.basis.dim} coefficients, got {c.shape}")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def from_modes(cls, basis: PlaneWaveBasis, values: dict) -> "FourierField":
        c = np.zeros(basis.dim, dtype=complex)
        for m, val in values.items():
            i = int(basis.index(m))
            if i < 0:
                raise InvalidParameterError(f"mode {m} outside cutoff {basis.cutoff}")
            c[i] += val
        return cls(basis, c)

    @classmethod
    def zero(cls, basis: PlaneWaveBasis) -> "FourierField":
        return cls(basis, np.zeros(basis.dim))

    def coefficient(self, m) -> complex:
        i = int(self.basis.index(m))
        return complex(self.coeffs[i]) if i >= 0 else 0j

    def is_real(self, tol: float = 1e-12) -> bool:
        neg = self.basis.index(-self.basis.modes)
        return bool(np.max(np.abs(self.coeffs[neg] - np.conj(self.coeffs)), initial=0.0) <= tol)

    def is_zero(self) -> bool:
        return not np.any(self.coeffs)

    @property
    def support(self) -> int:
        """Largest l-infinity norm among modes with a nonzero coefficient (-1 if none)."""
        nz = np.nonzero(self.coeffs)[0]
        if nz.size == 0:
            return -1
        return int(np.max(np.abs(self.basis.modes[nz])))

    def nonzero_modes(self):
        nz = np.nonzero(self.coeffs)[0]
        return self.basis.modes[nz], self.coeffs[nz]

    def scaled(self, factor: float) -> "FourierField":
        return FourierField(self.basis, factor * self.coeffs)

    def __add__(self, other: "FourierField") -> "FourierField":
        big = self.basis if self.basis.cutoff >= other.basis.cutoff else other.basis
        return FourierField(big, self.basis.embed(self.coeffs, big) + other.basis.embed(other.coeffs, big))

    def values(self, points) -> np.ndarray:
        """Evaluate at real-space points of shape (..., 2)."""
        pts = np.asarray(points, dtype=float)
        phases = np.exp(1j * pts @ self.basis.momenta().T)
        return phases @ self.coeffs / np.sqrt(self.basis.lattice.cell_area)


def inner(f, g) -> complex:
    """L2 inner product over one cell, antilinear in the first argument."""
    return complex(np.vdot(np.asarray(f), np.asarray(g)))


def _cosine_field(basis: PlaneWaveBasis, modes, amplitude: float) -> FourierField:
    c = amplitude * np.sqrt(basis.lattice.cell_area)
    vals = {}
    for m in modes:
        vals[m] = c
        vals[(-m[0], -m[1])] = c
    return FourierField.from_modes(basis, vals)


def honeycomb_potential(basis: PlaneWaveBasis, amplitude: float) -> FourierField:
    """amplitude * 2 * sum_i cos((m^i a*).x) over the three honeycomb modes."""
    if basis.cutoff < 1:
        raise InvalidParameterError("honeycomb potential needs cutoff >= 1")
    return _cosine_field(basis, HONEYCOMB_MODES, float(amplitude))


def ng_potential(basis: PlaneWaveBasis, lam: float) -> FourierField:
    """Cosine potential on the modes (1,0), (0,1), (0,2); it breaks the rotation symmetry."""
    if basis.cutoff < 2:
        raise InvalidParameterError("ng potential needs cutoff >= 2")
    return _cosine_field(basis, NG_MODES, float(lam))


@dataclass(frozen=True)
class SymmetryReport:
    residuals: dict
    tol: float

    @property
    def even(self) -> bool:
        return self.residuals["even"] <= self.tol

    @property
    def rotation(self) -> bool:
        return self.residuals["rotation"] <= self.tol

    @property
    def mirror(self) -> bool:
        return self.residuals["mirror"] <= self.tol

    @property
    def passed(self) -> bool:
        return self.even and self.rotation and self.mirror


def _permutation_residual(f: FourierField, image_modes: np.ndarray) -> float:
    """max |f(image(m)) - f(m)|, where image modes outside the window carry zero."""
    idx = f.basis.index(image_modes)
    moved = np.where(idx >= 0, f.coeffs[np.maximum(idx, 0)], 0.0)
    # a nonzero coefficient whose image left the window is a violation too
    return float(np.max(np.abs(moved - f.coeffs), initial=0.0))


def check_honeycomb_symmetry(f: FourierField, tol: float = 1e-12) -> SymmetryReport:
    if not f.is_real(tol=max(tol, 1e-12)):
        raise InvalidInputError("symmetry check expects a real-valued field")
    lat = f.basis.lattice
    m = f.basis.modes
    res = {
        "even": _permutation_residual(f, -m),
        "rotation": _permutation_residual(f, m @ lat.rotation_index.T),
        "mirror": _permutation_residual(f, m @ lat.mirror_index.T),
    }
    return SymmetryReport(res, tol)


def _overlap_slices(shift: int, n_src: int, n_dst: int, off_src: int, off_dst: int):
    """Index ranges so that dst[j] receives src[i] with (i - off_src) + shift = j - off_dst."""
    lo = max(0, off_dst - off_src + shift)
    hi = min(n_dst, off_dst - off_src + shift + n_src)
    if hi <= lo:
        return None
    s0 = lo - (off_dst - off_src + shift)
    return slice(s0, s0 + hi - lo), slice(lo, hi)


def shift_add(dst: np.ndarray, dst_cutoff: int, src: np.ndarray, src_cutoff: int, shift, coef) -> None:
    """dst[m + shift] += coef * src[m] on square grids of the two cutoffs (in place).

    Grids may carry leading batch axes; the last two axes are the mode axes.
    """
    nd, ns = 2 * dst_cutoff + 1, 2 * src_cutoff + 1
    a = _overlap_slices(int(shift[0]), ns, nd, src_cutoff, dst_cutoff)
    b = _overlap_slices(int(shift[1]), ns, nd, src_cutoff, dst_cutoff)
    if a is None or b is None:
        return
    dst[..., a[1], b[1]] += coef * src[..., a[0], b[0]]


def multiply(
    f: FourierField,
    u,
    u_basis: PlaneWaveBasis | None = None,
    out_basis: PlaneWaveBasis | None = None,
    truncate: bool = False,
) -> tuple[np.ndarray, PlaneWaveBasis]:
    """Coefficients of the product f * u.

    Without ``out_basis`` the result lives on a window large enough to hold
    every product mode.  A smaller explicit window requires ``truncate=True``.
    """
    u_basis = u_basis or f.basis
    u = np.asarray(u)
    if u.shape[-1] != u_basis.dim:
        raise DimensionError("coefficient vector does not match its basis")
    fmodes, fvals = f.nonzero_modes()
    fsup = max(f.support, 0)
    ugrid = u_basis.as_grid(u)
    used = np.any(u.reshape(-1, u_basis.dim) != 0, axis=0)
    usup = int(np.max(np.abs(u_basis.modes[used]), initial=0))
    if out_basis is None:
        out_basis = PlaneWaveBasis(u_basis.lattice, u_basis.cutoff + fsup)
    elif out_basis.cutoff < usup + fsup and not truncate:
        raise DimensionError(
            f"output cutoff {out_basis.cutoff} cannot hold product modes up to {usup + fsup}; "
            "pass truncate=True to project"
        )
    scale = 1.0 / np.sqrt(u_basis.lattice.cell_area)
    out = np.zeros(u.shape[:-1] + (out_basis.width, out_basis.width), dtype=complex)
    for p, c in zip(fmodes, fvals):
        shift_add(out, out_basis.cutoff, ugrid, u_basis.cutoff, p, c * scale)
    return out.reshape(u.shape[:-1] + (out_basis.dim,)), out_basis


def multiplication_matrix(f: FourierField, basis: PlaneWaveBasis) -> np.ndarray:
    """Galerkin matrix of multiplication by f on ``basis`` (an explicit projection)."""
    fmodes, fvals = f.nonzero_modes()
    scale = 1.0 / np.sqrt(basis.lattice.cell_area)
    mat = np.zeros((basis.dim, basis.dim), dtype=complex)
    cols = np.arange(basis.dim)
    for p, c in zip(fmodes, fvals):
        rows = basis.index(basis.modes + p)
        ok = rows >= 0
        mat[rows[ok], cols[ok]] += c * scale
    return mat
