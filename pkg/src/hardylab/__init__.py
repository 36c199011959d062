"""Numerical laboratory for local and global Hardy spaces of operators with a spectral gap.

Modules
-------
space      finite doubling metric measure spaces, balls and annuli
operator   model operators and their weighted eigendecompositions
calculus   functional calculus, kernels, localized norms, dt/t quadrature
squarefn   conical square functions, Hardy norms, energy identity
gge        fitted constants for Gaussian and gap-decay estimates
molecules  reproducing formula, Calderon split, molecules, tail estimates
harness    experiment configs, suites and the ``hardylab`` command
"""

from .calculus import (TimeGrid, apply_function, default_grids, log_integrate,
                       operator_kernel, restricted_norm, time_grid)
from .operator import SpectralOperator, build_operator, spectral_decompose
from .space import Ball, Space, annuli, ball_members, build_grid_space, doubling_exponent
from .squarefn import (evolve, hardy_norms, lower_bound_constant, spectral_identity_residual,
                       square_function)

__version__ = "0.1.0"

__all__ = [
    "Ball",
    "Space",
    "SpectralOperator",
    "TimeGrid",
    "annuli",
    "apply_function",
    "ball_members",
    "build_grid_space",
    "build_operator",
    "default_grids",
    "doubling_exponent",
    "evolve",
    "hardy_norms",
    "log_integrate",
    "lower_bound_constant",
    "operator_kernel",
    "restricted_norm",
    "spectral_decompose",
    "spectral_identity_residual",
    "square_function",
    "time_grid",
]
