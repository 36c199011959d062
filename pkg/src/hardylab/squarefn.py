"""Conical square functions, Hardy norms and the vertical energy identity.

Every routine accepts a single field of shape ``(P,)`` or a batch ``(P, k)``.
"""

from __future__ import annotations

import csv
import weakref
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .calculus import GridPair, TimeGrid, coefficients, default_grids, synthesize, time_grid
from .operator import SpectralOperator
from .space import Space, _BALL_RTOL

__all__ = [
    "HardyNorms",
    "IdentityTerms",
    "SquareFunctions",
    "evolve",
    "field_norm",
    "hardy_norms",
    "local_vertical_energy",
    "lower_bound_constant",
    "random_fields",
    "semigroup_profile",
    "spectral_identity_residual",
    "spectral_identity_terms",
    "square_function",
    "square_functions",
    "write_profile_csv",
]

_distance_cache: "weakref.WeakKeyDictionary[Space, np.ndarray]" = weakref.WeakKeyDictionary()

# cap on the size of one (points x nodes x fields) profile block
_BLOCK = 20_000_000


def field_norm(space: Space, f: np.ndarray, p: float = 2) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    mu = space.mass.reshape((-1,) + (1,) * (f.ndim - 1))
    return (mu * np.abs(f) ** p).sum(axis=0) ** (1 / p)


def lower_bound_constant(lam0: float) -> float:
    """``(1/4 - (lam0/2 + 1/4) exp(-2 lam0))**(1/2)``, the local-energy lower bound."""
    val = 0.25 - (lam0 / 2 + 0.25) * np.exp(-2 * lam0)
    return float(np.sqrt(max(val, 0.0)))


def random_fields(op: SpectralOperator, count: int, seed: int,
                  range_only: bool = False) -> np.ndarray:
    """Standard normal eigen-coefficients, normalised in L^2; shape ``(P, count)``."""
    rng = np.random.default_rng(seed)
    coef = rng.standard_normal((op.size, count))
    if range_only:
        coef[op.kernel_mask] = 0.0
    coef /= np.linalg.norm(coef, axis=0)
    return synthesize(op, coef)


def _kernel_values(lam: np.ndarray, s: np.ndarray, j: int) -> np.ndarray:
    x = np.multiply.outer(lam, s)
    return x ** j * np.exp(-x) if j else np.exp(-x)


def evolve(op: SpectralOperator, f: np.ndarray, t: float, j: int = 1,
           power: float | None = None) -> np.ndarray:
    """``(t**m L)**j exp(-t**m L) f``; ``power`` overrides the operator order."""
    if not t > 0:
        raise ValueError("t must be positive")
    if j < 0:
        raise ValueError("j must be non-negative")
    m = op.order if power is None else power
    coef = coefficients(op, f)
    F = _kernel_values(op.eigenvalues, np.array(t ** m), j)
    return synthesize(op, F.reshape((-1,) + (1,) * (coef.ndim - 1)) * coef)


def semigroup_profile(op: SpectralOperator, f: np.ndarray, nodes: np.ndarray,
                      power: float | None = None, j: int = 1) -> np.ndarray:
    """``(t**m L)**j exp(-t**m L) f`` at every node; shape ``(P, T) + batch``."""
    m = op.order if power is None else power
    coef = coefficients(op, f)
    F = _kernel_values(op.eigenvalues, np.asarray(nodes) ** m, j)
    if coef.ndim == 1:
        return op.eigenvectors @ (F * coef[:, None])
    return np.einsum("xi,it,ik->xtk", op.eigenvectors, F, coef, optimize=True)


def _sorted_distances(space: Space) -> np.ndarray:
    D = _distance_cache.get(space)
    if D is None:
        D = np.unique(space.metric)
        _distance_cache[space] = D
    return D


def cone_square(space: Space, density: np.ndarray, nodes: np.ndarray,
                weights: np.ndarray) -> np.ndarray:
    """``sum_t w_t mu(B(x,t))^{-1} sum_{y in B(x,t)} density(y,t) mu(y)``.

    Nodes sharing the same set of closed balls are merged before the ball
    averages are taken, so the cost scales with distinct radii, not nodes.
    """
    D = _sorted_distances(space)
    group = np.searchsorted(D, nodes * (1 + _BALL_RTOL), side="right") - 1
    mu = space.mass
    out = np.zeros((density.shape[0],) + density.shape[2:])
    mu_b = mu.reshape((-1,) + (1,) * (density.ndim - 2))
    for gid in np.unique(group):
        sel = group == gid
        E = np.tensordot(weights[sel], density[:, sel], axes=(0, 1))
        radius = D[gid]
        if radius == 0:
            out += E
            continue
        A = (space.metric <= radius * (1 + _BALL_RTOL)).astype(float)
        num = A @ (mu_b * E)
        den = (A @ mu).reshape(mu_b.shape)
        out += num / den
    return out


@dataclass(frozen=True)
class SquareFunctions:
    S: np.ndarray
    local: np.ndarray
    tail: np.ndarray


def _chunks(P: int, T: int, k: int):
    step = max(1, _BLOCK // max(P * T, 1))
    for start in range(0, k, step):
        yield slice(start, min(k, start + step))


def _cone_of(op: SpectralOperator, f: np.ndarray, grid: TimeGrid, power) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    if f.ndim == 1:
        V = semigroup_profile(op, f, grid.nodes, power)
        return cone_square(op.space, V ** 2, grid.nodes, grid.weights)
    out = np.empty((op.size, f.shape[1]))
    for sl in _chunks(op.size, len(grid), f.shape[1]):
        V = semigroup_profile(op, f[:, sl], grid.nodes, power)
        out[:, sl] = cone_square(op.space, V ** 2, grid.nodes, grid.weights)
    return out


def square_functions(op: SpectralOperator, f: np.ndarray,
                     grids: GridPair | None = None, ratio: float = 1.02) -> SquareFunctions:
    """Global, local (``t <= 1``) and tail (``t >= 1``) conical square functions.

    The global grid is the union of the local and tail grids, so
    ``S**2 = S_loc**2 + S_tail**2`` holds exactly.
    """
    if grids is None:
        grids = default_grids(op, ratio)
    loc2 = _cone_of(op, f, grids.local, grids.power)
    tail2 = _cone_of(op, f, grids.tail, grids.power)
    return SquareFunctions(np.sqrt(loc2 + tail2), np.sqrt(loc2), np.sqrt(tail2))


def square_function(op: SpectralOperator, f: np.ndarray, range: str = "global",
                    grids: GridPair | None = None, ratio: float = 1.02) -> np.ndarray:
    if grids is None:
        grids = default_grids(op, ratio)
    if range == "local":
        return np.sqrt(_cone_of(op, f, grids.local, grids.power))
    if range == "tail":
        return np.sqrt(_cone_of(op, f, grids.tail, grids.power))
    if range == "global":
        return square_functions(op, f, grids).S
    raise ValueError(f"range must be global, local or tail, got {range!r}")


@dataclass(frozen=True)
class HardyNorms:
    H1: np.ndarray
    h1: np.ndarray
    ratio: np.ndarray
    S_loc_l1: np.ndarray
    f_l1: np.ndarray


def hardy_norms(op: SpectralOperator, f: np.ndarray, grids: GridPair | None = None,
                ratio: float = 1.02) -> HardyNorms:
    """``||Sf||_1`` and ``||S_loc f||_1 + ||f||_1`` with their quotient (nan for f = 0)."""
    sq = square_functions(op, f, grids, ratio)
    space = op.space
    H1 = field_norm(space, sq.S, 1)
    sloc = field_norm(space, sq.local, 1)
    fl1 = field_norm(space, f, 1)
    h1 = sloc + fl1
    with np.errstate(invalid="ignore", divide="ignore"):
        q = np.where(h1 > 0, H1 / np.where(h1 > 0, h1, 1.0), np.nan)
    return HardyNorms(H1, h1, q, sloc, fl1)


@dataclass(frozen=True)
class IdentityTerms:
    quarter_norm: np.ndarray
    local_energy: np.ndarray
    spectral_term: np.ndarray

    @property
    def residual(self) -> np.ndarray:
        return np.abs(self.quarter_norm - self.local_energy - self.spectral_term)


def local_vertical_energy(op: SpectralOperator, f: np.ndarray,
                          grid: TimeGrid | None = None, ratio: float = 1.02) -> np.ndarray:
    """``sum_x mu(x) int_0^1 |t L exp(-t L) f(x)|^2 dt/t`` (first-order scaling)."""
    if grid is None:
        grid = default_grids(op, ratio, power=1).local
    f = np.asarray(f, dtype=float)
    mu = op.space.mass
    batch = f if f.ndim > 1 else f[:, None]
    out = np.empty(batch.shape[1])
    for sl in _chunks(op.size, len(grid), batch.shape[1]):
        V = semigroup_profile(op, batch[:, sl], grid.nodes, power=1)
        out[sl] = np.einsum("x,t,xtk->k", mu, grid.weights, V ** 2, optimize=True)
    return out if f.ndim > 1 else out[0]


def spectral_identity_terms(op: SpectralOperator, f: np.ndarray,
                            grid: TimeGrid | None = None, ratio: float = 1.02,
                            richardson: bool = False) -> IdentityTerms:
    """The three terms of ``||f||^2/4 = local energy + spectral remainder``.

    With ``richardson`` the local energy is extrapolated from the grid and
    its halved-log-step refinement, cancelling the O(ln(q)^2) endpoint error.
    """
    lam = op.eigenvalues
    coef = coefficients(op, f)
    w = (lam / 2 + 0.25) * np.exp(-2 * lam)
    w = w.reshape((-1,) + (1,) * (coef.ndim - 1))
    spectral = (w * coef ** 2).sum(axis=0)
    quarter = 0.25 * field_norm(op.space, f) ** 2
    if grid is None:
        grid = default_grids(op, ratio, power=1).local
    energy = local_vertical_energy(op, f, grid)
    if richardson:
        fine = time_grid(grid.t_min, grid.t_max, np.sqrt(grid.q))
        energy = (4 * local_vertical_energy(op, f, fine) - energy) / 3
    return IdentityTerms(quarter, energy, spectral)


def spectral_identity_residual(op: SpectralOperator, f: np.ndarray,
                               grid: TimeGrid | None = None, ratio: float = 1.02,
                               richardson: bool = False):
    """Absolute defect of the energy identity, quadrature against exact eigen-sum."""
    return spectral_identity_terms(op, f, grid, ratio, richardson).residual


def write_profile_csv(path: str | Path, sq: SquareFunctions) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x_index", "S", "S_loc", "S_tail"])
        for i, (a, b, c) in enumerate(zip(sq.S, sq.local, sq.tail)):
            w.writerow([i, repr(float(a)), repr(float(b)), repr(float(c))])
