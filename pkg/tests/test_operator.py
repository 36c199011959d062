import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hardylab.operator import (OperatorError, build_from_descriptor, build_operator,
                               decompose_cached, grid_laplacian, spectral_decompose)
from hardylab.space import build_grid_space, make_space

from conftest import harmonic


def test_shift_is_scaled_identity():
    sp = build_grid_space(1, 1.0, 4)
    np.testing.assert_array_equal(build_operator(sp, "shift", c=2.0), 2 * np.eye(4))


def test_dirichlet_laplacian_closed_form():
    P, extent = 50, 5.0
    h = extent / P
    sp = build_grid_space(1, extent, P)
    op = spectral_decompose(build_operator(sp, "laplacian"), sp)
    j = np.arange(1, P + 1)
    expected = 4 / h ** 2 * np.sin(j * np.pi / (2 * (P + 1))) ** 2
    np.testing.assert_allclose(op.eigenvalues, expected, rtol=1e-10)
    # cross-check with an independent solver on the raw matrix
    np.testing.assert_allclose(np.linalg.eigvalsh(build_operator(sp, "laplacian")),
                               expected, rtol=1e-10)


def test_schrodinger_assembly():
    sp = build_grid_space(1, 4.0, 16, origin=-2.0)
    A = build_operator(sp, "schrodinger", potential=lambda x: 9.0 * x[:, 0] ** 2)
    V = 9.0 * sp.points[:, 0] ** 2
    np.testing.assert_allclose(A, grid_laplacian(sp) + np.diag(V))
    named = build_operator(sp, "schrodinger", potential={"name": "harmonic", "omega": 3.0})
    np.testing.assert_allclose(named, A)


def test_fractional_and_errors():
    sp = build_grid_space(1, 4.0, 12)
    A = build_operator(sp, "fractional", m_pow=4)
    lap = grid_laplacian(sp)
    np.testing.assert_allclose(A, lap @ lap, atol=1e-8 * np.abs(lap @ lap).max())
    with pytest.raises(OperatorError):
        build_operator(sp, "fractional", m_pow=3)
    with pytest.raises(OperatorError):
        build_operator(sp, "schrodinger", potential=-np.ones(12))


def test_periodic_laplacian_is_gapless():
    sp = build_grid_space(1, 8.0, 16)
    op = spectral_decompose(build_operator(sp, "laplacian", "periodic"), sp)
    assert not op.gapped and abs(op.gap) <= op.gap_tol


def test_diag_example():
    sp = build_grid_space(1, 2.0, 2)
    op = spectral_decompose(np.diag([1.0, 3.0]), sp)
    np.testing.assert_allclose(op.eigenvalues, [1, 3])
    assert op.gap == 1.0 and op.gapped


def test_path_graph_gapless():
    sp = build_grid_space(1, 2.0, 2)
    op = spectral_decompose(np.array([[1.0, -1.0], [-1.0, 1.0]]), sp)
    np.testing.assert_allclose(op.eigenvalues, [0, 2], atol=1e-14)
    assert not op.gapped


def test_rejects_asymmetric_and_negative():
    sp = build_grid_space(1, 2.0, 2)
    with pytest.raises(OperatorError, match="self-adjoint"):
        spectral_decompose(np.array([[1.0, 0.5], [0.0, 1.0]]), sp)
    with pytest.raises(OperatorError, match="non-negative"):
        spectral_decompose(np.diag([-1.0, 1.0]), sp)


def test_weighted_symmetry_nonuniform_mass(rng):
    pts = np.arange(6.0)[:, None]
    mass = rng.uniform(0.5, 2.0, 6)
    sp = make_space(pts, np.abs(pts - pts.T), mass)
    B = rng.standard_normal((6, 6))
    S = B @ B.T  # symmetric positive, so D^{-1} S is mu-self-adjoint and >= 0
    A = S / mass[:, None]
    op = spectral_decompose(A, sp)
    gram = op.eigenvectors.T @ (mass[:, None] * op.eigenvectors)
    np.testing.assert_allclose(gram, np.eye(6), atol=1e-10)
    np.testing.assert_allclose(A @ op.eigenvectors, op.eigenvectors * op.eigenvalues,
                               atol=1e-8 * op.eigenvalues.max())


def test_random_schrodinger_orthonormality(rng):
    sp = build_grid_space(1, 8.0, 64)
    op = spectral_decompose(build_operator(sp, "schrodinger", potential=rng.uniform(0, 5, 64)),
                            sp)
    gram = op.eigenvectors.T @ (sp.mass[:, None] * op.eigenvectors)
    assert np.abs(gram - np.eye(64)).max() <= 1e-10
    assert op.residuals["orthonormality"] <= 1e-10
    assert op.residuals["reconstruction"] <= 1e-8


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_parseval(seed):
    op = harmonic(32, 8.0)
    f = np.random.default_rng(seed).standard_normal(32)
    coef = op.eigenvectors.T @ (op.space.mass * f)
    norm2 = (op.space.mass * f ** 2).sum()
    assert abs((coef ** 2).sum() - norm2) <= 1e-10 * norm2


@pytest.mark.parametrize("c", [0.0, 0.5, 3.0])
def test_shift_covariance(c):
    sp = build_grid_space(1, 8.0, 24, origin=-4)
    A = build_operator(sp, "schrodinger", potential={"name": "harmonic"})
    a = spectral_decompose(A, sp)
    b = spectral_decompose(A + c * np.eye(24), sp)
    np.testing.assert_allclose(b.eigenvalues, a.eigenvalues + c, rtol=1e-10, atol=1e-10)
    overlap = np.abs(np.sum(sp.mass[:, None] * a.eigenvectors * b.eigenvectors, axis=0))
    np.testing.assert_allclose(overlap, 1.0, atol=1e-8)
    s = a.shifted(c)
    np.testing.assert_allclose(s.eigenvalues, b.eigenvalues, rtol=1e-10, atol=1e-10)


def test_eigendata_cache(tmp_path):
    sp = build_grid_space(1, 8.0, 20, origin=-4)
    desc = {"kind": "schrodinger", "potential": "harmonic", "omega": 1.0}
    first = decompose_cached(sp, desc, 2, tmp_path)
    files = list(tmp_path.glob("eig-*.npz"))
    assert len(files) == 1
    second = decompose_cached(sp, desc, 2, tmp_path)
    np.testing.assert_array_equal(first.eigenvalues, second.eigenvalues)
    np.testing.assert_allclose(build_from_descriptor(sp, desc), first.matrix)
