"""Wall-clock timing of the exact solvers at a few values of 1/eps.

Run with ``python benchmarks/bench_exact.py [inv ...]``.  Each line reports the
fine-basis dimension, the method and the time for the 20 states nearest zero.
"""
import sys
import time

import numpy as np

from twoscale.exactsolver import ExactOperatorSpec, consistent_fine_cutoff, solve_exact
from twoscale.fourier import PlaneWaveBasis, honeycomb_potential
from twoscale.lattice import build_lattice
from twoscale.microsolver import detect_dirac


def main(invs):
    lat = build_lattice(5.0)
    v = honeycomb_potential(PlaneWaveBasis(lat, 1), 10.0)
    d = detect_dirac(v, lat, PlaneWaveBasis(lat, 12))
    k = 0.2 * lat.K
    for inv in invs:
        spec = ExactOperatorSpec(inv, k, v, None, consistent_fine_cutoff(inv, 12), d.E_F)
        methods = ["blocks", "sparse"] + (["dense"] if spec.basis.dim <= 4000 else [])
        for method in methods:
            t0 = time.perf_counter()
            sol = solve_exact(spec, n_nearest=20, method=method, want_vectors=False)
            dt = time.perf_counter() - t0
            print(f"1/eps={inv:2d} dim={spec.basis.dim:6d} {method:6s} {dt:8.2f} s  "
                  f"min |E| {np.min(np.abs(sol.energies)):.3e}")


if __name__ == "__main__":
    main([int(a) for a in sys.argv[1:]] or [2, 3, 5])
