import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import gammaincc, gammainc

from hardylab.calculus import coefficients, default_grids, synthesize, time_grid
from hardylab.operator import build_operator, spectral_decompose
from hardylab.space import Ball, build_grid_space, doubling_exponent, make_space
from hardylab.molecules import (Molecule, MoleculeDefinitionError, TentField, calderon_split,
                                cancellation_chain, molecule_tail_check, noncancellative_atoms,
                                pi1_of_tent, reproducing_constants, reproducing_symbol,
                                saturating_tent_atom, unit_partition, validate_molecule,
                                validate_tent_atom)
from hardylab.squarefn import field_norm, random_fields, semigroup_profile

from conftest import harmonic, heat


@pytest.fixture(scope="module")
def ho():
    return harmonic(128)


@pytest.fixture(scope="module")
def consts2():
    return reproducing_constants(2, 2)


def test_n1_m2_constants_exact():
    rc = reproducing_constants(1, 2)
    assert rc.exact_tail == 8
    assert rc.exact == (Fraction(1), Fraction(2), Fraction(2))
    assert (rc.c_tail, *rc.c) == (8.0, 1.0, 2.0, 2.0)
    assert rc.residual <= 1e-6


@pytest.mark.parametrize("N", [1, 2, 3, 5])
@pytest.mark.parametrize("m", [2, 3, 4])
def test_constants_closed_form(N, m):
    rc = reproducing_constants(N, m)
    assert rc.exact_tail == Fraction(m * 2 ** (N + 2), math.factorial(N + 1))
    assert rc.exact == tuple(Fraction(2 ** j, math.factorial(j)) for j in range(N + 2))
    assert rc.exact[0] == 1


@pytest.mark.parametrize("N,m", [(1, 2), (3, 4)])
def test_symbol_matches_incomplete_gamma(N, m):
    """Phi = P(N+2, 2 lam) + Q(N+2, 2 lam) split term by term."""
    rc = reproducing_constants(N, m)
    lam = np.array([0.01, 0.5, 3.0, 20.0])
    local = reproducing_symbol(N, m, rc.c_tail, [0.0] * (N + 2), lam,
                               time_grid(1e-7, 1.0, np.exp(2e-4)))
    np.testing.assert_allclose(local, gammainc(N + 2, 2 * lam), atol=5e-8)
    poly = reproducing_symbol(N, m, 0.0, rc.c, lam)
    np.testing.assert_allclose(poly, gammaincc(N + 2, 2 * lam), rtol=1e-13)


def test_symbol_limits():
    rc = reproducing_constants(2, 2)
    assert reproducing_symbol(2, 2, rc.c_tail, rc.c, [0.0])[0] == pytest.approx(rc.c[0])
    big = np.array([50.0])
    assert reproducing_symbol(2, 2, 0.0, rc.c, big)[0] < 1e-35
    assert reproducing_symbol(2, 2, rc.c_tail, [0.0] * 4, big)[0] == pytest.approx(1, abs=1e-6)


def test_constants_errors():
    with pytest.raises(ValueError):
        reproducing_constants(0)
    with pytest.raises(ArithmeticError):
        reproducing_constants(1, 2, tol=1e-12)


def test_calderon_eigenfunctions(ho, consts2):
    grid = default_grids(ho, 1.02).local
    for i in (0, 5, 40, 127):
        split = calderon_split(ho, ho.eigenvectors[:, i], 2, grid, consts2)
        assert split.residual <= 1e-4 and not split.projected


def test_calderon_zero(ho, consts2):
    split = calderon_split(ho, np.zeros(128), 2, consts=consts2)
    assert split.residual == 0 and not split.pi1.any() and not split.pi2.any()


def test_calderon_path_graph_projection():
    P = 12
    pts = np.arange(P, dtype=float)[:, None]
    sp = make_space(pts, np.abs(pts - pts.T), np.ones(P))
    A = 2 * np.eye(P) - np.eye(P, k=1) - np.eye(P, k=-1)
    A[0, 0] = A[-1, -1] = 1.0
    op = spectral_decompose(A, sp)
    assert not op.gapped
    f = np.random.default_rng(0).standard_normal(P)
    f_perp = f - f.mean()
    clean = calderon_split(op, f_perp, 1)
    assert clean.residual <= 1e-4 and not clean.projected
    dirty = calderon_split(op, f_perp + 3.0, 1)
    assert dirty.projected and dirty.removed_norm == pytest.approx(3.0 * np.sqrt(P))
    assert dirty.residual <= 1e-4


def test_pi1_with_b(ho, consts2):
    grid = default_grids(ho).local
    f = random_fields(ho, 1, 3)[:, 0]
    u = TentField(semigroup_profile(ho, f, grid.nodes), grid)
    pi1, b = pi1_of_tent(ho, u, consts2, with_b=True)
    L2b = synthesize(ho, ho.eigenvalues ** 2 * coefficients(ho, b))
    np.testing.assert_allclose(L2b, pi1, atol=1e-10 * np.abs(pi1).max())


def test_tent_atom_checks(ho):
    grid = time_grid(1e-3, 2.0, 1.05)
    ball = Ball(64, 1.0)
    zero = TentField(np.zeros((128, len(grid))), grid)
    assert validate_tent_atom(ho.space, zero, ball).passed
    sat = saturating_tent_atom(ho.space, ball, grid)
    rep = validate_tent_atom(ho.space, sat, ball)
    assert rep.passed and abs(rep.margin) <= 1e-8
    bad = sat.values.copy()
    bad[10, 3] = 1.0
    rep = validate_tent_atom(ho.space, TentField(bad, grid), ball)
    assert not rep.passed and rep.violation == (10, float(grid.nodes[3]))
    late = np.zeros_like(sat.values)
    late[64, -1] = 1.0
    assert validate_tent_atom(ho.space, TentField(late, grid), ball).violation[0] == 64
    with pytest.raises(ValueError):
        validate_tent_atom(ho.space, zero, Ball(64, 1e-4))


def normalised_indicator(space, ball):
    inB = space.ball_mask(ball)
    return np.where(inB, space.ball_measure(ball) ** -0.5 / np.sqrt(space.measure(inB)), 0.0)


def test_indicator_molecule(ho):
    ball = Ball(64, 1.5)
    a = Molecule(normalised_indicator(ho.space, ball), ball, 2)
    rep = validate_molecule(ho, a)
    assert rep.passed and rep.factor == pytest.approx(1.0)
    assert "overlap" in rep.branch
    assert all(v == 0 for k, v in rep.size_ratios.items() if k >= 1)
    rep2 = validate_molecule(ho, a.scaled(2.0))
    assert not rep2.passed and rep2.factor == pytest.approx(2.0)
    assert max(rep2.size_ratios, key=rep2.size_ratios.get) == 0


def test_radius_branches(ho):
    v = np.zeros(128)
    with pytest.raises(MoleculeDefinitionError):
        validate_molecule(ho, Molecule(v, Ball(64, 0.5), 1))
    with pytest.raises(MoleculeDefinitionError):
        validate_molecule(ho, Molecule(v, Ball(64, 2.5), 1, "cancellative",
                                       cancellation_chain(ho, v, 1)))
    with pytest.raises(MoleculeDefinitionError):
        validate_molecule(ho, Molecule(v, Ball(64, 1.0), 1, "cancellative"))


@settings(max_examples=15, deadline=None)
@given(scale=st.floats(1e-3, 1e3), seed=st.integers(0, 999))
def test_validator_homogeneous(scale, seed):
    op = harmonic(48, 8.0)
    b = np.random.default_rng(seed).standard_normal(48)
    chain = cancellation_chain(op, b, 1)
    a = Molecule(chain[-1], Ball(24, 1.0), 1, "cancellative", chain)
    base = validate_molecule(op, a)
    scaled = validate_molecule(op, a.scaled(scale))
    assert scaled.factor == pytest.approx(scale * base.factor, rel=1e-10)
    for key, v in base.chain_ratios.items():
        assert scaled.chain_ratios[key] == pytest.approx(scale * v, rel=1e-10)


def test_pi1_of_tent_atom_is_cancellative_molecule(ho, consts2):
    grid = default_grids(ho).local
    ball = Ball(64, 1.0)
    u = saturating_tent_atom(ho.space, ball, grid)
    pi1, b = pi1_of_tent(ho, u, consts2, with_b=True)
    chain = cancellation_chain(ho, b, 2)
    rep = validate_molecule(ho, Molecule(pi1, ball, 2, "cancellative", chain))
    assert rep.chain_defect <= 1e-8
    assert 0 < rep.factor < 100
    fixed = validate_molecule(ho, Molecule(pi1, ball, 2, "cancellative", chain).scaled(1 / rep.factor))
    assert fixed.passed


def test_partition_and_reassembly(ho, consts2):
    parts = unit_partition(ho.space)
    assert len(parts) == 16
    cover = np.sum([m for m, _ in parts], axis=0)
    assert np.all(cover == 1)
    f = random_fields(ho, 1, 11)[:, 0]
    pieces = noncancellative_atoms(ho, f, parts, consts2)
    assert len(pieces) == 16 * 4
    total = sum(p.coefficient * p.molecule.values for p in pieces)
    lam = ho.eigenvalues
    pi2 = synthesize(ho, np.polynomial.polynomial.polyval(lam, consts2.c) * np.exp(-2 * lam)
                     * coefficients(ho, f))
    assert field_norm(ho.space, total - pi2) <= 1e-8 * field_norm(ho.space, pi2)
    for p in pieces:
        if p.coefficient:
            assert validate_molecule(ho, p.molecule).factor == pytest.approx(1.0)


def test_single_cell_gives_n_plus_2(ho, consts2):
    parts = unit_partition(ho.space)
    mask, _ = parts[7]
    f = np.where(mask, 1.0, 0.0)
    pieces = [p for p in noncancellative_atoms(ho, f, parts, consts2) if p.coefficient]
    assert len(pieces) == consts2.N + 2


def test_partition_must_cover(ho, consts2):
    parts = unit_partition(ho.space)[:3]
    with pytest.raises(ValueError, match="cover"):
        noncancellative_atoms(ho, np.ones(128), parts, consts2)


def test_tail_linear_and_refuses_gapless(ho):
    ball = Ball(64, 1.0)
    a = Molecule(normalised_indicator(ho.space, ball), ball, 2)
    base = molecule_tail_check(ho, a)
    half = molecule_tail_check(ho, a.scaled(0.5))
    assert base.finite and base.rows
    for r0, r1 in zip(base.rows, half.rows):
        for key in ("est1_lhs", "est2_lhs"):
            if key in r0:
                assert r1[key] == pytest.approx(0.5 * r0[key], rel=1e-12)
    assert half.S_inf_l1 == pytest.approx(0.5 * base.S_inf_l1, rel=1e-12)
    with pytest.raises(ValueError, match="gap"):
        molecule_tail_check(heat(32, 8.0, "periodic"), Molecule(np.zeros(32), Ball(16, 1.0), 1))


def test_tail_cancellative_reports_only_s_inf(ho):
    b = normalised_indicator(ho.space, Ball(64, 1.0))
    chain = cancellation_chain(ho, b, 1)
    rep = molecule_tail_check(ho, Molecule(chain[-1], Ball(64, 1.0), 1, "cancellative", chain))
    assert rep.rows == [] and np.isfinite(rep.S_inf_l1) and np.isnan(rep.sup_est1)


def test_annulus_sum_bound():
    sp = build_grid_space(1, 64.0, 256)
    for c, r in ((128, 1.0), (100, 0.5), (140, 2.0)):
        ball = Ball(c, r)
        fit = doubling_exponent(sp, [ball.scaled(2.0 ** l) for l in range(4)])
        C = 2 * np.sqrt(fit.constant)
        for k in range(4):
            lhs = sum(2.0 ** -l * sp.ball_measure(ball.scaled(2.0 ** l)) ** -0.5
                      for l in range(k + 1))
            rhs = C * 2 ** (fit.n * k / 2) * sp.ball_measure(ball.scaled(2.0 ** k)) ** -0.5
            assert lhs <= rhs * (1 + 1e-12)
