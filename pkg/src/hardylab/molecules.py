"""Reproducing formula, Calderon split, molecule and tent-atom validators, tail estimates."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .calculus import GridPair, TimeGrid, coefficients, default_grids, synthesize, time_grid
from .operator import SpectralOperator
from .space import Ball, Space, annulus_masks, last_annulus
from .squarefn import field_norm, semigroup_profile, square_function

__all__ = [
    "CalderonSplit",
    "Molecule",
    "MoleculeDefinitionError",
    "MoleculeReport",
    "ReproducingConstants",
    "TailReport",
    "TentAtomReport",
    "TentField",
    "calderon_split",
    "cancellation_chain",
    "molecule_tail_check",
    "noncancellative_atoms",
    "pi1_of_tent",
    "reproducing_constants",
    "reproducing_symbol",
    "saturating_tent_atom",
    "unit_partition",
    "validate_molecule",
    "validate_tent_atom",
]

CERTIFICATE_TOL = 1e-6
# grid used to certify the scalar identity; ln q = 5e-4 keeps the midpoint error near 2e-7
_CERT_RATIO = math.exp(5e-4)
_CERT_LAMBDAS = np.concatenate([[0.0], np.geomspace(0.1, 50.0, 60)])


class MoleculeDefinitionError(ValueError):
    """Radius incompatible with the requested molecule kind."""


# --- reproducing formula -------------------------------------------------------------

@dataclass(frozen=True)
class ReproducingConstants:
    """``c_tail`` multiplies the ``int_0^1`` term, ``c[j]`` multiplies ``L^j e^{-2L}``."""

    N: int
    m: float
    c_tail: float
    c: tuple[float, ...]
    exact_tail: Fraction | None
    exact: tuple[Fraction, ...]
    residual: float


def _tail_polynomial(j_top: int, m) -> list[Fraction]:
    """Coefficients ``P`` with ``int_1^inf (t^m l)^j e^{-2 t^m l} dt/t = e^{-2l} sum_k P[k] l^k``.

    Substituting ``s = t^m l`` gives ``(1/m) int_l^inf s^{j-1} e^{-2s} ds``;
    integrating by parts once,
    ``I_{j+1}(l) = l^j e^{-2l} / (2m) + (j/2) I_j(l)`` with ``I_1 = e^{-2l}/(2m)``.
    """
    m = Fraction(m).limit_denominator(10**6)
    poly = [1 / (2 * m)]
    for j in range(1, j_top):
        nxt = [Fraction(j, 2) * a for a in poly] + [Fraction(0)]
        nxt[j] += 1 / (2 * m)
        poly = nxt
    return poly


def reproducing_symbol(N: int, m: float, c_tail: float, c: Sequence[float],
                       lam: np.ndarray, grid: TimeGrid | None = None) -> np.ndarray:
    """``Phi(l) = c_tail int_0^1 (t^m l)^{N+2} e^{-2 t^m l} dt/t + sum_j c_j l^j e^{-2l}``."""
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    if grid is None:
        grid = time_grid(1e-7, 1.0, _CERT_RATIO)
    s = np.multiply.outer(lam, grid.nodes ** m)
    local = c_tail * (s ** (N + 2) * np.exp(-2 * s)) @ grid.weights
    poly = np.polynomial.polynomial.polyval(lam, np.asarray(c, dtype=float))
    return local + poly * np.exp(-2 * lam)


def reproducing_constants(N: int, m: float = 2, lambdas: np.ndarray | None = None,
                          tol: float = CERTIFICATE_TOL) -> ReproducingConstants:
    """Constants of the truncated Calderon formula, certified by ``max |Phi - 1|``.

    ``c_tail = m 2^{N+2} / (N+1)!`` normalises ``int_0^inf``; the remaining
    ``c_0..c_{N+1}`` reproduce ``c_tail int_1^inf`` and come out as ``2^j / j!``.
    """
    if N < 1 or int(N) != N:
        raise ValueError("N must be an integer >= 1")
    if m < 1:
        raise ValueError("order must be at least 1")
    N = int(N)
    mf = Fraction(m).limit_denominator(10**6)
    exact_tail = mf * 2 ** (N + 2) / math.factorial(N + 1)
    poly = _tail_polynomial(N + 2, m)
    exact = tuple(exact_tail * a for a in poly)
    c_tail = float(exact_tail)
    c = tuple(float(x) for x in exact)
    lam = _CERT_LAMBDAS if lambdas is None else np.union1d(_CERT_LAMBDAS, lambdas)
    grid = time_grid(min(1e-7, (1e-4 / max(lam.max(), 1.0)) ** (1 / m)), 1.0, _CERT_RATIO)
    phi = reproducing_symbol(N, m, c_tail, c, lam, grid)
    residual = float(np.abs(phi - 1).max())
    if not residual <= tol:
        raise ArithmeticError(f"reproducing constants failed certification: {residual:.3e}")
    return ReproducingConstants(N, float(m), c_tail, c, exact_tail, exact, residual)


# --- Calderon split ------------------------------------------------------------------

@dataclass(frozen=True)
class TentField:
    """Values ``u(x, t_i)`` on points x grid nodes."""

    values: np.ndarray
    grid: TimeGrid
    ball: Ball | None = None


@dataclass(frozen=True)
class CalderonSplit:
    pi1: np.ndarray
    pi2: np.ndarray
    residual: float
    projected: bool
    removed_norm: float


def _pi2_coefficients(op: SpectralOperator, consts: ReproducingConstants) -> np.ndarray:
    lam = op.eigenvalues
    return np.polynomial.polynomial.polyval(lam, np.asarray(consts.c)) * np.exp(-2 * lam)


def pi1_of_tent(op: SpectralOperator, u: TentField, consts: ReproducingConstants,
                with_b: bool = False):
    """``c_tail int_0^1 (t^m L)^{N+1} e^{-t^m L} u(t) dt/t`` over nodes ``t <= 1``.

    With ``with_b`` also returns ``b = c_tail int_0^1 t^{m(N+1)} L e^{-t^m L} u(t) dt/t``,
    for which ``L^N b`` equals the first output.
    """
    m, N = op.order, consts.N
    keep = u.grid.nodes <= 1.0
    nodes = u.grid.nodes[keep]
    w = u.grid.weights[keep]
    U = coefficients(op, u.values[:, keep])  # (P, T)
    lam = op.eigenvalues
    s = np.multiply.outer(lam, nodes ** m)
    decay = np.exp(-s)
    pi1_coef = consts.c_tail * ((s ** (N + 1) * decay * U) @ w)
    pi1 = synthesize(op, pi1_coef)
    if not with_b:
        return pi1
    tpow = nodes ** (m * (N + 1))
    b_coef = consts.c_tail * ((lam[:, None] * tpow * decay * U) @ w)
    return pi1, synthesize(op, b_coef)


def calderon_split(op: SpectralOperator, f: np.ndarray, N: int,
                   grid: TimeGrid | None = None, consts: ReproducingConstants | None = None,
                   ratio: float = 1.02) -> CalderonSplit:
    """Split ``f = pi1 u + pi2 f`` with ``u(t) = t^m L e^{-t^m L} f``.

    Components of ``f`` in the null space of ``L`` are projected out first and
    the projection is flagged; the residual is relative to the projected field.
    """
    f = np.asarray(f, dtype=float)
    if consts is None:
        consts = reproducing_constants(N, op.order)
    if grid is None:
        grid = default_grids(op, ratio).local
    coef = coefficients(op, f)
    ker = op.kernel_mask
    removed = float(np.linalg.norm(coef[ker]))
    coef = np.where(ker, 0.0, coef)
    fr = synthesize(op, coef)
    norm = float(np.linalg.norm(coef))
    projected = removed > 1e-10 * max(norm, 1.0)
    if norm == 0:
        z = np.zeros_like(f)
        return CalderonSplit(z, z.copy(), 0.0, projected, removed)
    u = TentField(semigroup_profile(op, fr, grid.nodes), grid)
    pi1 = pi1_of_tent(op, u, consts)
    pi2 = synthesize(op, _pi2_coefficients(op, consts) * coef)
    resid = float(field_norm(op.space, fr - pi1 - pi2) / field_norm(op.space, fr))
    return CalderonSplit(pi1, pi2, resid, projected, removed)


# --- tent atoms ----------------------------------------------------------------------

@dataclass(frozen=True)
class TentAtomReport:
    passed: bool
    support_ok: bool
    norm: float
    bound: float
    margin: float
    violation: tuple[int, float] | None = None


def validate_tent_atom(space: Space, u: TentField, ball: Ball) -> TentAtomReport:
    """Support in ``B x (0, r_B)`` and ``(int_0^{r_B} ||u(t)||_2^2 dt/t)^{1/2} <= mu(B)^{-1/2}``.

    ``margin = 1 - norm / bound``; a failing support check names the first
    offending ``(point, node time)``.
    """
    if u.grid.t_min >= ball.radius:
        raise ValueError("grid does not reach into (0, r_B)")
    vals = np.asarray(u.values, dtype=float)
    inB = space.ball_mask(ball)
    in_time = u.grid.nodes <= ball.radius
    outside = ~(inB[:, None] & in_time[None, :])
    bad = np.argwhere(outside & (vals != 0))
    violation = None
    if bad.size:
        x, i = bad[0]
        violation = (int(x), float(u.grid.nodes[i]))
    energy = (space.mass[:, None] * vals[:, in_time] ** 2).sum(axis=0)
    norm = float(np.sqrt(energy @ u.grid.weights[in_time]))
    bound = space.ball_measure(ball) ** -0.5
    margin = 1 - norm / bound
    passed = violation is None and margin >= -1e-12
    return TentAtomReport(passed, violation is None, norm, bound, margin, violation)


def saturating_tent_atom(space: Space, ball: Ball, grid: TimeGrid) -> TentField:
    """``u = const * 1_B`` on nodes ``t <= r_B``, scaled so the atom norm is exactly the bound."""
    inB = space.ball_mask(ball)
    in_time = grid.nodes <= ball.radius
    if not in_time.any():
        raise ValueError("no grid node below r_B")
    vals = np.zeros((space.size, len(grid)))
    vals[np.ix_(inB, in_time)] = 1.0
    energy = space.measure(inB) * grid.weights[in_time].sum()
    vals *= space.ball_measure(ball) ** -0.5 / np.sqrt(energy)
    return TentField(vals, grid, ball)


# --- molecules -----------------------------------------------------------------------

@dataclass(frozen=True)
class Molecule:
    """Candidate N-molecule; ``chain = [b, Lb, ..., L^N b]`` for the cancellative kind."""

    values: np.ndarray
    ball: Ball
    N: int
    kind: str = "noncancellative"
    chain: tuple[np.ndarray, ...] | None = None

    def scaled(self, factor: float) -> "Molecule":
        chain = None if self.chain is None else tuple(factor * b for b in self.chain)
        return Molecule(factor * self.values, self.ball, self.N, self.kind, chain)


@dataclass
class MoleculeReport:
    passed: bool
    factor: float
    branch: str
    size_ratios: dict[int, float]
    chain_ratios: dict[tuple[int, int], float] = field(default_factory=dict)
    chain_defect: float = 0.0


def cancellation_chain(op: SpectralOperator, b: np.ndarray, N: int) -> tuple[np.ndarray, ...]:
    coef = coefficients(op, b)
    lam = op.eigenvalues
    return tuple(synthesize(op, lam ** j * coef) for j in range(N + 1))


def _annulus_bound(space: Space, ball: Ball, k: int) -> float:
    return 2.0 ** (-k) * space.ball_measure(ball.scaled(2.0 ** k)) ** -0.5


def validate_molecule(op: SpectralOperator, a: Molecule) -> MoleculeReport:
    """Evaluate every size and cancellation inequality of an N-molecule.

    ``factor`` is the largest left/right ratio, i.e. the smallest divisor
    that makes the candidate pass.  Radii in ``[1, 2]`` satisfy both branches;
    the branch actually used is the requested kind.
    """
    space = op.space
    r = a.ball.radius
    if a.kind == "noncancellative":
        if r < 1:
            raise MoleculeDefinitionError(f"noncancellative molecule needs r_B >= 1, got {r}")
    elif a.kind == "cancellative":
        if r > 2:
            raise MoleculeDefinitionError(f"cancellative molecule needs r_B <= 2, got {r}")
        if a.chain is None or len(a.chain) != a.N + 1:
            raise MoleculeDefinitionError("cancellative molecule needs chain [b, ..., L^N b]")
    else:
        raise ValueError(f"unknown molecule kind {a.kind!r}")
    branch = a.kind + (" (overlap r_B in [1,2])" if 1 <= r <= 2 else "")
    mu = space.mass
    size, chain_ratios = {}, {}
    for k in range(last_annulus(space, a.ball) + 1):
        Ck, _ = annulus_masks(space, a.ball, k)
        if not Ck.any():
            continue
        rhs = _annulus_bound(space, a.ball, k)
        size[k] = float(np.sqrt((mu[Ck] * a.values[Ck] ** 2).sum())) / rhs
        if a.kind == "cancellative":
            for j, Ljb in enumerate(a.chain):
                lhs = r ** (op.order * j) * np.sqrt((mu[Ck] * Ljb[Ck] ** 2).sum())
                chain_ratios[(j, k)] = float(lhs / (r ** (op.order * a.N) * rhs))
    defect = 0.0
    if a.kind == "cancellative":
        lam = op.eigenvalues
        anorm = max(float(field_norm(space, a.values)), np.finfo(float).tiny)
        defect = float(field_norm(space, a.chain[-1] - a.values)) / anorm
        for j in range(a.N):
            nxt = synthesize(op, lam * coefficients(op, a.chain[j]))
            scale = max(float(field_norm(space, nxt)), np.finfo(float).tiny)
            defect = max(defect, float(field_norm(space, nxt - a.chain[j + 1])) / scale)
    ratios = list(size.values()) + list(chain_ratios.values())
    factor = max(ratios) if ratios else 0.0
    passed = factor <= 1 + 1e-12 and defect <= 1e-8
    return MoleculeReport(passed, factor, branch, size, chain_ratios, defect)


def unit_partition(space: Space, side: float = 1.0) -> list[tuple[np.ndarray, Ball]]:
    """Half-open axis-aligned cells of the given side, each inside a radius-one ball.

    The ball is centred at the cell point nearest the geometric cell centre.
    """
    pts = space.points
    origin = pts.min(axis=0)
    idx = np.floor((pts - origin) / side + 1e-12).astype(int)
    cells = []
    for key in sorted({tuple(row) for row in idx}):
        mask = np.all(idx == np.array(key), axis=1)
        centre = origin + (np.array(key) + 0.5) * side
        members = np.flatnonzero(mask)
        c = members[np.argmin(((pts[members] - centre) ** 2).sum(axis=1))]
        ball = Ball(int(c), 1.0)
        if not np.all(space.ball_mask(ball)[mask]):
            raise ValueError(f"cell {key} is not contained in a unit ball")
        cells.append((mask, ball))
    return cells


@dataclass(frozen=True)
class AtomPiece:
    molecule: Molecule
    coefficient: float
    cell: int
    j: int


def noncancellative_atoms(op: SpectralOperator, f: np.ndarray,
                          partition: Sequence[tuple[np.ndarray, Ball]],
                          consts: ReproducingConstants) -> list[AtomPiece]:
    """Split ``pi2 f`` into ``c_j L^j e^{-2L}(1_Q f)`` over cells ``Q`` and ``j = 0..N+1``.

    Each piece is divided by its validation factor, so it is a noncancellative
    molecule on ``B_Q`` and coefficient times molecule reproduces the piece.
    """
    f = np.asarray(f, dtype=float)
    covered = np.zeros(op.size, dtype=bool)
    for mask, ball in partition:
        if np.any(covered & mask):
            raise ValueError("partition cells overlap")
        if ball.radius > 1 + 1e-12 or not np.all(op.space.ball_mask(ball)[mask]):
            raise ValueError("cell not inside a unit ball")
        covered |= mask
    if np.any((f != 0) & ~covered):
        raise ValueError("partition does not cover the support of f")
    lam = op.eigenvalues
    pieces = []
    for q, (mask, ball) in enumerate(partition):
        coef = coefficients(op, np.where(mask, f, 0.0))
        for j, cj in enumerate(consts.c):
            g = synthesize(op, cj * lam ** j * np.exp(-2 * lam) * coef)
            mol = Molecule(g, ball, consts.N)
            factor = validate_molecule(op, mol).factor
            if factor == 0:
                pieces.append(AtomPiece(mol, 0.0, q, j))
            else:
                pieces.append(AtomPiece(mol.scaled(1 / factor), factor, q, j))
    return pieces


# --- tail estimates ------------------------------------------------------------------

@dataclass
class TailReport:
    rows: list[dict]
    S_inf_l1: float
    sup_est1: float
    sup_est2: float
    kind: str

    @property
    def finite(self) -> bool:
        return bool(np.isfinite(self.sup_est1) and np.isfinite(self.sup_est2)
                    and np.isfinite(self.S_inf_l1))


def _tail_energy(op: SpectralOperator, coef_fields: np.ndarray, grid: TimeGrid,
                 masks: Sequence[np.ndarray]) -> np.ndarray:
    """``(int ||1_E t^m L e^{-t^m L} g||^2 dt/t)^{1/2}`` for each field g and mask E."""
    lam = op.eigenvalues
    s = np.multiply.outer(lam, grid.nodes ** op.order)
    F = s * np.exp(-s)
    mu = op.space.mass
    out = np.empty((coef_fields.shape[1], len(masks)))
    for i in range(coef_fields.shape[1]):
        V = op.eigenvectors @ (F * coef_fields[:, i:i + 1])
        dens = mu[:, None] * V ** 2
        for e, mask in enumerate(masks):
            out[i, e] = np.sqrt(dens[mask].sum(axis=0) @ grid.weights)
    return out


def molecule_tail_check(op: SpectralOperator, a: Molecule, grids: GridPair | None = None,
                        ratio: float = 1.02) -> TailReport:
    """Large-time estimates of a molecule and ``||S_inf a||_1``.

    For each k: ``est1 = (int_1^inf ||1_{C_k} t^m L e^{-t^m L} a||^2 dt/t)^{1/2}``
    split over ``1_{C_k*} a`` and its complement, and
    ``est2 = (int_{2^{k-1}}^inf ||1_{2^{k-1}B} t^m L e^{-t^m L} a||^2 dt/t)^{1/2}``
    split over ``1_{2^k B} a`` and its complement; both against
    ``2^{-k} mu(2^k B)^{-1/2}``.  Cancellative molecules only get ``||S_inf a||_1``.
    """
    if not op.gapped:
        raise ValueError("tail estimates need a spectral gap")
    if grids is None:
        grids = default_grids(op, ratio)
    space = op.space
    S_inf = float(field_norm(space, square_function(op, a.values, "tail", grids), 1))
    if a.kind == "cancellative":
        return TailReport([], S_inf, float("nan"), float("nan"), a.kind)
    ball = a.ball
    t_max = grids.tail.t_max
    rows = []
    for k in range(last_annulus(space, ball) + 2):
        Ck, Cstar = annulus_masks(space, ball, k)
        rhs = _annulus_bound(space, ball, k)
        row = {"k": k, "est1_rhs": rhs, "est2_rhs": rhs}
        if Ck.any():
            pieces = np.stack([a.values, np.where(Cstar, a.values, 0.0),
                               np.where(Cstar, 0.0, a.values)], axis=1)
            e1 = _tail_energy(op, coefficients(op, pieces), grids.tail, [Ck])[:, 0]
            row.update(est1_lhs=e1[0], est1_near=e1[1], est1_far=e1[2])
        if k >= 1:
            lo = 2.0 ** (k - 1)
            g = time_grid(lo, max(t_max, 2 * lo), grids.tail.q)
            inner = space.ball_mask(ball.scaled(2.0 ** (k - 1)))
            big = space.ball_mask(ball.scaled(2.0 ** k))
            pieces = np.stack([a.values, np.where(big, a.values, 0.0),
                               np.where(big, 0.0, a.values)], axis=1)
            e2 = _tail_energy(op, coefficients(op, pieces), g, [inner])[:, 0]
            row.update(est2_lhs=e2[0], est2_near=e2[1], est2_far=e2[2])
        rows.append(row)
    sup1 = max((r["est1_lhs"] / r["est1_rhs"] for r in rows if "est1_lhs" in r), default=0.0)
    sup2 = max((r["est2_lhs"] / r["est2_rhs"] for r in rows if "est2_lhs" in r), default=0.0)
    return TailReport(rows, S_inf, float(sup1), float(sup2), a.kind)
