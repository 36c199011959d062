"""Spectral functional calculus, integral kernels, localized norms and dt/t quadrature."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Hashable

import numpy as np

from .operator import SpectralOperator

__all__ = [
    "TimeGrid",
    "GridPair",
    "apply_function",
    "coefficients",
    "default_grids",
    "log_integrate",
    "operator_kernel",
    "restricted_norm",
    "synthesize",
    "time_grid",
]

SpectralFunction = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Log-midpoint rule for ``int_{t_min}^{t_max} g(t) dt/t``.

    Nodes sit at ``t_min * q**(i + 1/2)`` and every node has weight ``ln q``,
    so the weights add up to ``ln(t_max / t_min)`` exactly.
    """

    t_min: float
    t_max: float
    q: float
    nodes: np.ndarray
    weights: np.ndarray

    def __len__(self) -> int:
        return self.nodes.shape[0]

    @property
    def log_step(self) -> float:
        return float(np.log(self.q))


def time_grid(t_min: float, t_max: float, ratio: float = 1.02) -> TimeGrid:
    """Geometric grid whose ratio is the largest ``q <= ratio`` fitting an integer count."""
    if not 0 < t_min < t_max:
        raise ValueError(f"need 0 < t_min < t_max, got {t_min}, {t_max}")
    if not ratio > 1:
        raise ValueError("grid ratio must exceed 1")
    span = np.log(t_max / t_min)
    count = max(1, int(np.ceil(span / np.log(ratio) - 1e-9)))
    step = span / count
    nodes = t_min * np.exp(step * (np.arange(count) + 0.5))
    nodes.setflags(write=False)
    weights = np.full(count, step)
    weights.setflags(write=False)
    return TimeGrid(float(t_min), float(t_max), float(np.exp(step)), nodes, weights)


@dataclass(frozen=True)
class GridPair:
    """Local grid on ``[t_min, 1]`` and tail grid on ``[1, t_max]``."""

    local: TimeGrid
    tail: TimeGrid
    power: float

    @property
    def nodes(self) -> np.ndarray:
        return np.concatenate([self.local.nodes, self.tail.nodes])

    @property
    def weights(self) -> np.ndarray:
        return np.concatenate([self.local.weights, self.tail.weights])


def default_grids(op: SpectralOperator, ratio: float = 1.02,
                  power: float | None = None) -> GridPair:
    """Quadrature grids sized from the spectrum.

    ``t_min`` makes ``t**m * lambda_max = 1e-5`` so the discarded small-time
    part of any square-function integral is below 1e-10.  With a gap,
    ``exp(-2 lambda_0 t_max**m) = 1e-12``; without one,
    ``t_max = 10 (1/lambda_+)**(1/m)`` for the smallest positive eigenvalue.
    """
    m = op.order if power is None else float(power)
    lam = op.eigenvalues
    top = float(lam.max())
    t_min = (1e-5 / top) ** (1 / m) if top > 0 else 1e-5
    t_min = min(t_min, 0.5)
    if op.gapped:
        t_max = (np.log(1e12) / (2 * op.gap)) ** (1 / m)
    else:
        positive = lam[lam > op.gap_tol]
        t_max = 10 * (1 / positive.min()) ** (1 / m) if positive.size else 10.0
    t_max = max(t_max, 2.0)
    return GridPair(time_grid(t_min, 1.0, ratio), time_grid(1.0, t_max, ratio), m)


def log_integrate(g: Callable[[np.ndarray], np.ndarray], grid: TimeGrid) -> np.ndarray:
    """``sum_i g(t_i) ln q``; ``g`` is called once on the node array."""
    values = np.asarray(g(grid.nodes), dtype=float)
    if values.ndim == 0:
        values = np.full(len(grid), float(values))
    return np.tensordot(grid.weights, values, axes=(0, 0))


def coefficients(op: SpectralOperator, f: np.ndarray) -> np.ndarray:
    """Expansion coefficients ``<phi_i, f>``; ``f`` may carry trailing batch axes."""
    f = np.asarray(f, dtype=float)
    mu = op.space.mass.reshape((-1,) + (1,) * (f.ndim - 1))
    return np.tensordot(op.eigenvectors, mu * f, axes=(0, 0))


def synthesize(op: SpectralOperator, coef: np.ndarray) -> np.ndarray:
    return np.tensordot(op.eigenvectors, coef, axes=(1, 0))


def apply_function(op: SpectralOperator, F: SpectralFunction, f: np.ndarray) -> np.ndarray:
    """``F(L) f = sum_i F(lambda_i) <phi_i, f> phi_i``."""
    Flam = np.asarray(F(op.eigenvalues), dtype=float)
    coef = coefficients(op, f)
    Flam = Flam.reshape((-1,) + (1,) * (coef.ndim - 1))
    return synthesize(op, Flam * coef)


def operator_kernel(op: SpectralOperator, F: SpectralFunction,
                    tag: Hashable | None = None) -> np.ndarray:
    """Kernel ``K(x, y) = sum_i F(lambda_i) phi_i(x) phi_i(y)`` against ``mu(y)``.

    With a ``tag`` the kernel is memoised on the operator under that key.
    """

    def compute():
        Flam = np.asarray(F(op.eigenvalues), dtype=float)
        phi = op.eigenvectors
        K = (phi * Flam) @ phi.T
        K = 0.5 * (K + K.T)
        K.setflags(write=False)
        return K

    if tag is None:
        return compute()
    return op.cached(("kernel", tag), compute)


def _as_mask(E, size: int) -> np.ndarray:
    E = np.asarray(E)
    if E.dtype == bool:
        if E.shape != (size,):
            raise ValueError("mask has the wrong length")
        return E
    mask = np.zeros(size, dtype=bool)
    mask[E.astype(int)] = True
    return mask


def restricted_norm(op: SpectralOperator, F: SpectralFunction | None, E_out, E_in,
                    p: int = 2, kernel: np.ndarray | None = None) -> float:
    """Norm of ``1_{E_out} F(L) 1_{E_in}`` from ``L^p(mu)`` to ``L^2(mu)``.

    For ``p = 1`` this is the largest ``L^2`` norm of a kernel column over
    ``y`` in ``E_in``; for ``p = 2`` the top singular value of the
    ``sqrt(mu)``-weighted restricted kernel.  Sets are index arrays or masks;
    an empty set gives 0.
    """
    if p not in (1, 2):
        raise ValueError(f"only p = 1 and p = 2 are supported, got {p}")
    K = operator_kernel(op, F) if kernel is None else kernel
    mu = op.space.mass
    out = _as_mask(E_out, op.size)
    inn = _as_mask(E_in, op.size)
    if not out.any() or not inn.any():
        return 0.0
    block = K[np.ix_(out, inn)]
    if p == 1:
        cols = (mu[out][:, None] * block ** 2).sum(axis=0)
        return float(np.sqrt(cols.max()))
    weighted = np.sqrt(mu[out])[:, None] * block * np.sqrt(mu[inn])[None, :]
    if min(weighted.shape) == 1:
        return float(np.linalg.norm(weighted))
    return float(np.linalg.norm(weighted, 2))
