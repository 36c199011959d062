"""Local vertical energy of random fields on a discretised harmonic oscillator.

Prints the defect of the energy identity for a few fields and compares the
local energy against the lower bound c(lambda_0) ||f||_2.
"""

import numpy as np

from hardylab import build_grid_space, build_operator, spectral_decompose
from hardylab.calculus import default_grids
from hardylab.squarefn import (field_norm, lower_bound_constant, random_fields,
                               spectral_identity_terms)

space = build_grid_space(1, 16.0, 128, origin=-8.0)
op = spectral_decompose(build_operator(space, "schrodinger", potential={"name": "harmonic"}), space)
print(f"lambda_0 = {op.gap:.6f}, lambda_max = {op.eigenvalues.max():.1f}")

f = random_fields(op, 5, seed=0)
grid = default_grids(op, 1.01, power=1).local
terms = spectral_identity_terms(op, f, grid)
norm2 = field_norm(space, f) ** 2

c = lower_bound_constant(op.gap)
print(f"c(lambda_0) = {c:.6f}")
print(f"{'field':>5} {'defect/||f||^2':>15} {'energy^(1/2)/||f||':>20}")
for i in range(f.shape[1]):
    ratio = np.sqrt(terms.local_energy[i] / norm2[i])
    print(f"{i:5d} {terms.residual[i] / norm2[i]:15.2e} {ratio:20.6f}")

# the ground state attains the bound
phi = op.eigenvectors[:, 0]
t0 = spectral_identity_terms(op, phi, grid, richardson=True)
print(f"ground state: energy^(1/2) = {np.sqrt(t0.local_energy):.8f} vs c = {c:.8f}")
