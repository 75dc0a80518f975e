"""On-disk cache for the micro-scale solve and reduced families.

Files are ``.npz`` archives carrying a format version and the digest of the
micro-scale configuration.  A stale or foreign file is ignored and recomputed.
"""
from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

from .effective import EffectiveBlocks
from .fourier import FourierField, PlaneWaveBasis
from .lattice import build_lattice
from .microsolver import BlochSolution, DiracData
from .perturbation import ReducedFamily

CACHE_VERSION = "twoscale-cache-3"
log = logging.getLogger(__name__)


def _path(directory: Path, stem: str, key: str) -> Path:
    return Path(directory) / f"{stem}-{key}.npz"


def _read(path: Path, key: str):
    if not path.exists():
        return None
    try:
        with np.load(path, allow_pickle=False) as z:
            data = {name: z[name] for name in z.files}
    except (OSError, ValueError) as exc:
        log.warning("cache file %s unreadable (%s); recomputing", path, exc)
        return None
    if str(data.get("version")) != CACHE_VERSION or str(data.get("key")) != key:
        log.warning("cache file %s is stale; recomputing", path)
        return None
    return data


def _write(path: Path, **arrays) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp.npz")
    np.savez(tmp, version=np.array(CACHE_VERSION), **arrays)
    tmp.replace(path)


def save_dirac(directory, key: str, d: DiracData) -> Path:
    sol = d.full_solution_at_K
    path = _path(directory, "micro", key)
    _write(
        path,
        key=np.array(key),
        a0=np.array(d.lattice.a0),
        cutoff=np.array(d.basis.cutoff),
        potential_cutoff=np.array(d.potential.basis.cutoff),
        potential=d.potential.coeffs,
        m_F=np.array(d.m_F),
        E_F=np.array(d.E_F),
        w1=d.w1,
        w2=d.w2,
        v_F=np.array(d.v_F),
        eta=np.array(d.eta),
        q=np.asarray(sol.q),
        eigenvalues=sol.eigenvalues,
        eigenvectors=sol.eigenvectors,
        diagnostics=np.array(json.dumps(d.diagnostics, sort_keys=True, default=float)),
    )
    return path


def load_dirac(directory, key: str) -> DiracData | None:
    data = _read(_path(directory, "micro", key), key)
    if data is None:
        return None
    lat = build_lattice(float(data["a0"]))
    basis = PlaneWaveBasis(lat, int(data["cutoff"]))
    pot = FourierField(PlaneWaveBasis(lat, int(data["potential_cutoff"])), data["potential"])
    sol = BlochSolution(data["q"], data["eigenvalues"], data["eigenvectors"], basis)
    return DiracData(
        int(data["m_F"]),
        float(data["E_F"]),
        data["w1"],
        data["w2"],
        float(data["v_F"]),
        int(data["eta"]),
        sol,
        pot,
        json.loads(str(data["diagnostics"])),
    )


def save_family(directory, key: str, tag: str, family: ReducedFamily, blocks: EffectiveBlocks) -> Path:
    path = _path(directory, "family", f"{key}-{_safe(tag)}")
    _write(
        path,
        key=np.array(key),
        kind=np.array(family.kind),
        vectors=family.vectors,
        direction=np.array([] if family.direction is None else family.direction, dtype=float),
        n=np.array(-1 if family.n is None else family.n),
        labels=np.array(json.dumps(list(family.labels))),
        gram_S=blocks.gram_S,
        energy_M=blocks.energy_M,
        coupling_T=blocks.coupling_T,
        velocity_L=blocks.velocity_L,
        v_F=np.array(blocks.v_F),
    )
    return path


def load_family(directory, key: str, tag: str):
    data = _read(_path(directory, "family", f"{key}-{_safe(tag)}"), key)
    if data is None:
        return None
    direction = data["direction"]
    n = int(data["n"])
    vectors = np.array(data["vectors"])
    vectors.setflags(write=False)
    fam = ReducedFamily(
        str(data["kind"]),
        vectors,
        None if direction.size == 0 else direction,
        None if n < 0 else n,
        tuple(json.loads(str(data["labels"]))),
    )
    blocks = EffectiveBlocks(data["gram_S"], data["energy_M"], data["coupling_T"], data["velocity_L"], float(data["v_F"]))
    return fam, blocks


def _safe(tag: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in tag)
