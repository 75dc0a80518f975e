"""Command line: ``twoscale <command> [--config FILE] [--out DIR] [--workers N]``.

Exit codes: 0 all asserted tolerances hold, 1 a tolerance failed,
2 configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import experiments as ex
from .config import load_config
from .errors import ConfigError, InvalidParameterError, NumericalError, TwoScaleError

COMMANDS = ("micro", "constants", "bands", "compare", "asymptotics", "checks")
EXIT_OK, EXIT_TOLERANCE, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3
NUMBER_FORMAT = "%.12e"

log = logging.getLogger("twoscale")


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return NUMBER_FORMAT % float(x)
    return str(x)


class Writer:
    """Emits every output file with a config-hash header line."""

    def __init__(self, out_dir: Path, config_hash: str):
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.header = f"# config_hash={config_hash}\n"
        self.written: list[Path] = []

    def text(self, name: str, lines) -> Path:
        path = self.out / name
        path.write_text(self.header + "".join(f"{ln}\n" for ln in lines), encoding="utf-8")
        self.written.append(path)
        return path

    def csv(self, name: str, columns, rows, plot: str | None = None) -> Path:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(x) for x in row])
        path = self.out / name
        path.write_text(self.header + buf.getvalue(), encoding="utf-8")
        self.written.append(path)
        if plot is not None:
            self.text(Path(name).with_suffix(".gp").name, plot.splitlines())
        return path


def _checks_lines(checks) -> list[str]:
    return [c.line() for c in checks]


def _plot_bands(csv_name: str, sources) -> str:
    lines = [
        "set datafile separator ','",
        "set xlabel 'path arclength'",
        "set ylabel 'energy (Fermi level at zero)'",
        "set key outside",
    ]
    plots = [
        f"'{csv_name}' using 2:(strcol(5) eq '{s}' ? $7 : 1/0) every ::1 with points pt 7 ps 0.3 title '{s}'"
        for s in sources
    ]
    lines.append("plot " + ", \\\n     ".join(plots))
    return "\n".join(lines)


def _plot_errors(csv_name: str, kinds, sweep: str) -> str:
    lines = [
        "set datafile separator ','",
        "set logscale xy" if sweep == "mu" else "set logscale y",
        f"set xlabel '{sweep}'",
        "set ylabel 'relative eigenvector distance'",
    ]
    plots = [
        f"'{csv_name}' using 3:((strcol(1) eq '{sweep}' && strcol(2) eq '{k}') ? $4 : 1/0) every ::1 "
        f"with linespoints title '{k}'"
        for k in kinds
    ]
    lines.append("plot " + ", \\\n     ".join(plots))
    return "\n".join(lines)


# --------------------------------------------------------------------------- commands


def cmd_micro(ctx, w: Writer):
    rows, checks = ex.run_micro(ctx)
    w.text("micro_report.txt", [f"{name} = {_fmt(val)}" for name, val in rows] + _checks_lines(checks))
    return checks


def cmd_constants(ctx, w: Writer):
    consts, structure, checks = ex.run_constants(ctx)
    lines = [f"{name} = {_fmt(val)}  (imaginary residue {_fmt(im)})" for name, val, im in consts.as_rows()]
    lines.append(f"E3 - E_F = {_fmt(consts.E3 - consts.E_F)}" if consts.E3 is not None else "E3 unavailable")
    w.text("constants.txt", lines)
    slines = []
    for name, rep in structure:
        parts = ", ".join(f"{k} {_fmt(v)}" for k, v in rep.deviations.items())
        slines.append(f"{'PASS' if rep.passed else 'FAIL'}  {name}: {parts}")
    w.text("structure.txt", slines + _checks_lines([c for c in checks if c.name.startswith("lemma")]))
    return checks


def _inverses(ctx):
    return list(ctx.cfg.inv_epsilon)


def _suffix(ctx, inv) -> str:
    return "" if len(ctx.cfg.inv_epsilon) == 1 else f"_inv{inv}"


def cmd_bands(ctx, w: Writer):
    for inv in _inverses(ctx):
        path, diagrams = ex.run_bands(ctx, inv)
        cols = ["sample_index", "arclength", "k1", "k2", "source", "band_index", "energy"]
        raw, tracked = [], []
        for tag, diag in diagrams.items():
            for i, k in enumerate(path.samples):
                for b in range(diag.n_bands):
                    base = [i, path.arclength[i], k[0], k[1], tag, b]
                    raw.append(base + [diag.energies[i, b]])
                    tracked.append(base + [diag.tracked[i, b]])
            if tag == "exact":
                for i, k in enumerate(path.samples):
                    for b in range(diag.n_bands):
                        raw.append([i, path.arclength[i], k[0], k[1], "exact_unscaled", b,
                                    diag.energies[i, b] / inv])
        sfx = _suffix(ctx, inv)
        name = f"bands{sfx}.csv"
        w.csv(name, cols, raw, _plot_bands(name, list(diagrams)))
        tname = f"bands_tracked{sfx}.csv"
        w.csv(tname, cols, tracked, _plot_bands(tname, list(diagrams)))
    return []


def cmd_compare(ctx, w: Writer):
    checks = []
    for inv in _inverses(ctx):
        path, comps, c = ex.run_compare(ctx, inv)
        checks += c
        summary, samples = [], []
        for tag, comp in comps.items():
            summary.append([tag, inv, comp.mean_delta, comp.max_delta, comp.mean_distance, len(comp.failures)])
            for p in comp.points:
                for j, m in enumerate(p.matches):
                    samples.append([tag, p.index, path.arclength[p.index], p.k[0], p.k[1], j, m.effective_energy,
                                    m.exact_energy, m.overlap, m.distance])
        sfx = _suffix(ctx, inv)
        w.csv(f"branch{sfx}.csv", ["model_kind", "inv_epsilon", "mean_abs_dE", "max_abs_dE", "mean_distance",
                                   "unmatched"], summary)
        w.csv(f"branch_samples{sfx}.csv", ["model_kind", "sample_index", "arclength", "k1", "k2", "state",
                                           "effective_energy", "exact_energy", "matched_overlap", "distance"],
              samples)
    w.text("compare_report.txt", _checks_lines(checks))
    return checks


def cmd_asymptotics(ctx, w: Writer):
    inv = _inverses(ctx)[0]
    mu_curves, checks = ex.run_mu_sweep(ctx, inv)
    lam_curves, c2 = ex.run_lambda_sweep(ctx, inv)
    checks += c2
    rows = []
    for c in mu_curves + lam_curves:
        for g, dist, ov in zip(c.grid, c.distances, c.overlaps):
            rows.append([c.parameter, c.kind, g, dist, ov])
    w.csv("errors.csv", ["sweep_name", "model_kind", "parameter_value", "distance", "matched_overlap"], rows,
          _plot_errors("errors.csv", [c.kind for c in mu_curves], "mu"))
    slopes = [["mu", c.kind, c.fit_window[0], c.fit_window[1], c.slope] for c in mu_curves]
    w.csv("slopes.csv", ["sweep_name", "model_kind", "fit_lo", "fit_hi", "slope"], slopes)
    w.text("asymptotics_report.txt", _checks_lines(checks))
    return checks


def cmd_checks(ctx, w: Writer):
    checks = ex.run_checks(ctx)
    _, c = ex.run_schur(ctx)
    checks += c
    w.text("checks_report.txt", _checks_lines(checks))
    return checks


HANDLERS = {
    "micro": cmd_micro,
    "constants": cmd_constants,
    "bands": cmd_bands,
    "compare": cmd_compare,
    "asymptotics": cmd_asymptotics,
    "checks": cmd_checks,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="twoscale", description="Two-scale effective models for honeycomb superlattices")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="flat key = value configuration file")
    p.add_argument("--out", help="output directory (overrides output.dir)")
    p.add_argument("--workers", type=int, default=1, help="worker threads for independent solves")
    p.add_argument("--no-cache", action="store_true", help="do not read or write the micro cache")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(command: str, config_path=None, out=None, workers: int = 1, use_cache: bool = True) -> int:
    try:
        cfg = load_config(config_path)
        if out is not None:
            cfg = replace(cfg, output_dir=str(out))
        if workers < 1:
            raise ConfigError("--workers must be at least 1")
    except (ConfigError, InvalidParameterError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = Path(cfg.output_dir)
    writer = Writer(out_dir, cfg.config_hash())
    ctx = ex.Context(cfg, out_dir / "cache" if use_cache else None, workers)
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            checks = HANDLERS[command](ctx, writer)
        for notice in ctx.notices:
            print(f"notice: {notice}", file=sys.stderr)
        for wmsg in caught:
            print(f"warning: {wmsg.message}", file=sys.stderr)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, TwoScaleError, MemoryError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    for c in checks:
        print(c.line())
    failed = [c for c in checks if not c.passed]
    for p in writer.written:
        log.info("wrote %s", p)
    return EXIT_TOLERANCE if failed else EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return run(args.command, args.config, args.out, args.workers, not args.no_cache)


if __name__ == "__main__":
    sys.exit(main())
