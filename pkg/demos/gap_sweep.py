"""How the ratio ||Sf||_1 / (||S_loc f||_1 + ||f||_1) moves as L + eps I gains a gap.

Starts from the periodic Laplacian, which has a constant null vector, and
writes the sweep table to stdout as CSV.
"""

import csv
import sys

from hardylab import build_grid_space, build_operator, spectral_decompose
from hardylab.harness import gap_sweep

space = build_grid_space(1, 16.0, 96, origin=-8.0)
op = spectral_decompose(build_operator(space, "laplacian", "periodic"), space)

rows = gap_sweep(op, (0.0, 0.1, 0.25, 0.5, 1.0, 2.0), fields=30, seed=3)
w = csv.writer(sys.stdout, lineterminator="\n")
w.writerow(["eps", "lambda0", "gapped", "c_lower", "delta_fit", "ratio_max"])
for r in rows:
    delta = "" if r["delta_fit"] is None else f"{r['delta_fit']:.4f}"
    w.writerow([r["eps"], f"{r['lambda0']:.3g}", r["gapped"], f"{r['c_lower']:.4f}", delta,
                f"{r['ratio_max']:.4f}"])
