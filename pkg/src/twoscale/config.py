"""Flat ``key = value`` run configuration with typed fields and line diagnostics."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .perturbation import parse_family_tag

MACRO_KINDS = ("honeycomb", "ng", "none")
BAND_SOURCES = ("exact", "effective", "schur", "folded")


@dataclass(frozen=True)
class RunConfig:
    a0: float = 5.0
    micro_amplitude: float = 10.0
    macro_kind: str = "none"
    macro_lambda: float = 0.0
    inv_epsilon: tuple = (7,)
    micro_cutoff: int = 12
    fine_cutoff: int | None = None  # None: consistent with the micro cutoff
    nu: int = 2
    families: tuple = ("F0", "F1")
    path_samples: int = 20
    band_sources: tuple = ("exact", "effective")
    exact_states: int | None = None  # None: 2 (1/eps)^2, the folded Fermi pair
    mu_grid: tuple = tuple(np.logspace(-2, -1, 7).tolist())
    mu_fit: tuple = (1e-2, 1e-1)
    lambda_grid: tuple = (0.0, 1e-4, 1e-3, 1e-2, 0.1, 0.5, 1.0, 1.5, 2.0)
    lambda_kinds: tuple = ("F1", "F^6")
    schur_inverse: tuple = (8, 16, 32)
    schur_family: str = "F1"
    check_inverse: tuple = (2, 3)
    weak_inverse: tuple = (8, 16)
    output_dir: str = "out"
    tol_degeneracy: float | None = None
    tol_structure: float = 1e-8
    tol_oracle: float = 1e-6
    seed: int = 0

    def config_hash(self) -> str:
        """Short digest of every field that can change a result (the output location cannot)."""
        text = ";".join(f"{f.name}={getattr(self, f.name)!r}" for f in fields(self) if f.name != "output_dir")
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def micro_key(self) -> str:
        """Digest of the fields that determine the micro-scale solve only."""
        text = f"a0={self.a0!r};amp={self.micro_amplitude!r};N={self.micro_cutoff!r};tol={self.tol_degeneracy!r}"
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def fine_for(self, inv: int) -> int:
        """Fine cutoff for comparisons: folds onto the micro window and holds every reconstruction."""
        if self.fine_cutoff is not None:
            return self.fine_cutoff
        return inv * self.micro_cutoff + max(inv // 2, self.nu)

    def folding_fine_for(self, inv: int) -> int:
        """Fine cutoff whose residue blocks are exactly the micro window (the folding oracle needs this)."""
        if self.fine_cutoff is not None:
            return self.fine_cutoff
        return inv * self.micro_cutoff + inv // 2

    def states_for(self, inv: int) -> int:
        return self.exact_states if self.exact_states is not None else 2 * inv * inv


def _int(text: str) -> int:
    val = float(text)
    if not math.isfinite(val) or val != int(val):
        raise ValueError(f"expected an integer, got {text!r}")
    return int(val)


def _float(text: str) -> float:
    val = float(text)
    if not math.isfinite(val):
        raise ValueError(f"expected a finite number, got {text!r}")
    return val


def _items(text: str) -> list[str]:
    return [t for t in text.replace(",", " ").split() if t]


def _grid(text: str) -> tuple:
    text = text.strip()
    for name, fn in (("logspace", np.logspace), ("linspace", np.linspace)):
        if text.startswith(name + "(") and text.endswith(")"):
            args = _items(text[len(name) + 1:-1])
            if len(args) != 3:
                raise ValueError(f"{name} takes (start, stop, count)")
            return tuple(fn(_float(args[0]), _float(args[1]), _int(args[2])).tolist())
    return tuple(_float(t) for t in _items(text))


def _fine(text: str):
    return None if text.strip() == "auto" else _int(text)


def _optional_int(text: str):
    return None if text.strip() == "auto" else _int(text)


def _optional_float(text: str):
    return None if text.strip() == "auto" else _float(text)


def _families(text: str) -> tuple:
    tags = tuple(_items(text))
    for t in tags:
        parse_family_tag(t.split("@")[0])
    return tags


def _choice(options):
    def parse(text):
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text

    return parse


def _choices(options):
    def parse(text):
        vals = tuple(_items(text))
        bad = [v for v in vals if v not in options]
        if bad:
            raise ValueError(f"unknown entries {bad}; allowed: {', '.join(options)}")
        return vals

    return parse


def _pair(text: str) -> tuple:
    vals = tuple(_float(t) for t in _items(text))
    if len(vals) != 2:
        raise ValueError("expected two numbers")
    return vals


KEYS = {
    "lattice.a0": ("a0", _float),
    "potential.micro.amplitude": ("micro_amplitude", _float),
    "potential.macro.kind": ("macro_kind", _choice(MACRO_KINDS)),
    "potential.macro.lambda": ("macro_lambda", _float),
    "epsilon.inverse": ("inv_epsilon", lambda t: tuple(_int(x) for x in _items(t))),
    "cutoffs.micro": ("micro_cutoff", _int),
    "cutoffs.fine": ("fine_cutoff", _fine),
    "cutoffs.nu": ("nu", _int),
    "families": ("families", _families),
    "path.samples": ("path_samples", _int),
    "bands.sources": ("band_sources", _choices(BAND_SOURCES)),
    "exact.states": ("exact_states", _optional_int),
    "sweeps.mu": ("mu_grid", _grid),
    "sweeps.mu.fit": ("mu_fit", _pair),
    "sweeps.lambda": ("lambda_grid", _grid),
    "sweeps.lambda.families": ("lambda_kinds", _families),
    "schur.inverse": ("schur_inverse", lambda t: tuple(_int(x) for x in _items(t))),
    "schur.family": ("schur_family", lambda t: _families(t)[0]),
    "checks.inverse": ("check_inverse", lambda t: tuple(_int(x) for x in _items(t))),
    "checks.weak.inverse": ("weak_inverse", lambda t: tuple(_int(x) for x in _items(t))),
    "output.dir": ("output_dir", str),
    "tolerances.degeneracy": ("tol_degeneracy", _optional_float),
    "tolerances.structure": ("tol_structure", _float),
    "tolerances.oracle": ("tol_oracle", _float),
    "seed": ("seed", _int),
}


def validate(cfg: RunConfig) -> RunConfig:
    problems = []
    if cfg.a0 <= 0:
        problems.append("lattice.a0 must be positive")
    for name in ("micro_cutoff", "nu", "path_samples"):
        if getattr(cfg, name) < 1:
            problems.append(f"{name} must be at least 1")
    if cfg.fine_cutoff is not None and cfg.fine_cutoff < 1:
        problems.append("cutoffs.fine must be at least 1")
    for name in ("inv_epsilon", "schur_inverse", "check_inverse", "weak_inverse"):
        vals = getattr(cfg, name)
        if not vals or any(v < 1 for v in vals):
            problems.append(f"{name} entries must be integers >= 1")
    for name in ("mu_grid", "lambda_grid"):
        g = np.asarray(getattr(cfg, name))
        if g.size == 0 or np.any(np.diff(g) <= 0):
            problems.append(f"{name} must be strictly increasing")
    if cfg.mu_grid and min(cfg.mu_grid) <= 0:
        problems.append("sweeps.mu must be positive")
    if cfg.mu_fit[0] >= cfg.mu_fit[1]:
        problems.append("sweeps.mu.fit must be an increasing pair")
    if problems:
        raise ConfigError("; ".join(problems))
    return cfg


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    values = {}
    seen = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: key {key!r} already set on line {seen[key]}")
        seen[key] = lineno
        attr, conv = KEYS[key]
        try:
            values[attr] = conv(val)
        except Exception as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from exc
    return validate(replace(RunConfig(), **values))


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return validate(RunConfig())
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    return parse_config(text, str(p))
