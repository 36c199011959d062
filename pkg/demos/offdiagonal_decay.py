"""Gaussian and polynomial off-diagonal decay of the 1-D heat semigroup.

Fits the Gaussian rate c of ||1_B(x,t) e^{-t^2 L} 1_B(y,t)||, then the
polynomial exponent of the annulus-to-complement norms, and finally the
exponential rate that a spectral gap adds at large times.
"""

import numpy as np

from hardylab import Ball, build_grid_space, build_operator, spectral_decompose
from hardylab.gge import gap_decay_fit, gge_fit, offdiag_profiles

space = build_grid_space(1, 16.0, 128, origin=-8.0)
lap = spectral_decompose(build_operator(space, "laplacian"), space)

x = 64
rep = gge_fit(lap, 2, [(x, y, t) for t in (0.5, 1.0, 1.5) for y in range(space.size)])
print(f"Gaussian rate c = {rep.constants['c']:.4f}, 1 - R^2 = {rep.extra['fit_residual']:.1e}, "
      f"prefactor {rep.prefactor:.3f}")

_, poly = offdiag_profiles(lap, Ball(x, 1.0), 4, np.geomspace(0.05, 8.0, 40))
print(f"annulus-to-complement exponent {poly.constants['exponent']:.2f} "
      f"(shape exponent n + 2 = {poly.constants['target']:.2f})")

# the harmonic oscillator has lambda_0 ~ 1, so t^2 L e^{-t^2 L} decays like e^{-delta t^2}
ho = spectral_decompose(build_operator(space, "schrodinger", potential={"name": "harmonic"}), space)
every = np.ones(space.size, dtype=bool)
decay = gap_decay_fit(ho, [(every, every)], np.geomspace(0.1, 5.0, 50))
print(f"delta = {decay.constants['delta']:.4f} against lambda_0 / 2 = {ho.gap / 2:.4f}; "
      f"prefactor at lambda_0 / 2: {decay.constants['prefactor_half_gap']:.4f}")
