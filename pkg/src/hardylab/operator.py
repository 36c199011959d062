"""Non-negative self-adjoint operators on L^2(mu) and their eigendecompositions."""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .space import Space

__all__ = [
    "OperatorError",
    "SpectralOperator",
    "build_operator",
    "build_from_descriptor",
    "decompose_cached",
    "descriptor_hash",
    "grid_laplacian",
    "potential_values",
    "spectral_decompose",
]


class OperatorError(ValueError):
    """Raised for operators that are not symmetric or not non-negative."""


@dataclass(eq=False)
class SpectralOperator:
    """Exact spectral data of a non-negative self-adjoint operator.

    Columns of ``eigenvectors`` are orthonormal for ``<f, g> = sum f g mu``.
    ``order`` is the exponent ``m`` in the semigroup scaling ``exp(-t**m L)``.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    order: float
    space: Space
    matrix: np.ndarray
    gap_tol: float
    descriptor: dict = field(default_factory=dict)
    residuals: dict = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def size(self) -> int:
        return self.eigenvalues.shape[0]

    @property
    def gap(self) -> float:
        return float(self.eigenvalues[0])

    @property
    def gapped(self) -> bool:
        return self.gap > self.gap_tol

    @property
    def kernel_mask(self) -> np.ndarray:
        """Eigen-indices spanning the null space (eigenvalue within ``gap_tol``)."""
        return self.eigenvalues <= self.gap_tol

    def cached(self, key, compute: Callable[[], np.ndarray]) -> np.ndarray:
        """Insert-or-read on the per-operator cache; safe across threads."""
        with self._lock:
            hit = self._cache.get(key)
        if hit is not None:
            return hit
        value = compute()
        with self._lock:
            return self._cache.setdefault(key, value)

    def with_order(self, order: float) -> "SpectralOperator":
        return SpectralOperator(self.eigenvalues, self.eigenvectors, order, self.space,
                                self.matrix, self.gap_tol, dict(self.descriptor),
                                dict(self.residuals))

    def shifted(self, eps: float) -> "SpectralOperator":
        """Spectral data of ``L + eps I`` without a new eigensolve."""
        if eps < 0:
            raise ValueError("shift must be non-negative")
        desc = dict(self.descriptor)
        desc["shift"] = desc.get("shift", 0.0) + eps
        lam = self.eigenvalues + eps
        gap_tol = 1e-10 * float(np.abs(lam).max())
        return SpectralOperator(lam, self.eigenvectors, self.order, self.space,
                                self.matrix + eps * np.eye(self.size), gap_tol, desc,
                                dict(self.residuals))


def grid_laplacian(space: Space, boundary: str = "dirichlet") -> np.ndarray:
    """Second-difference Laplacian ``-Delta_h`` on a grid space, scaled by 1/h^2."""
    gen = space.generator
    if gen.get("kind") != "grid":
        raise ValueError("laplacian assembly needs a grid space")
    if boundary not in ("dirichlet", "periodic"):
        raise ValueError(f"unknown boundary {boundary!r}")
    count = gen["count"]
    h = gen["extent"] / count
    T = 2.0 * np.eye(count) - np.eye(count, k=1) - np.eye(count, k=-1)
    if boundary == "periodic" and count > 2:
        T[0, -1] -= 1.0
        T[-1, 0] -= 1.0
    elif boundary == "periodic":
        T = np.zeros((count, count)) if count == 1 else np.array([[2.0, -2.0], [-2.0, 2.0]])
    T /= h ** 2
    if gen["dims"] == 1:
        return T
    I = np.eye(count)
    return np.kron(T, I) + np.kron(I, T)


def potential_values(space: Space, potential) -> np.ndarray:
    """Evaluate a potential given as an array, a callable of points, or a named descriptor.

    Named specs are dicts: ``{"name": "harmonic", "omega": w}`` gives
    ``w**2 |x - c|**2`` about the box centre ``c``; ``{"name": "constant", "value": v}``.
    """
    if potential is None:
        return np.zeros(space.size)
    if callable(potential):
        V = np.asarray(potential(space.points), dtype=float).reshape(-1)
    elif isinstance(potential, dict):
        name = potential.get("name", "zero")
        if name == "zero":
            V = np.zeros(space.size)
        elif name == "constant":
            V = np.full(space.size, float(potential["value"]))
        elif name == "harmonic":
            gen = space.generator
            center = gen.get("origin", 0.0) + gen.get("extent", 0.0) / 2
            r2 = ((space.points - center) ** 2).sum(axis=1)
            V = float(potential.get("omega", 1.0)) ** 2 * r2
        else:
            raise ValueError(f"unknown potential {name!r}")
    else:
        V = np.asarray(potential, dtype=float).reshape(-1)
    if V.shape != (space.size,):
        raise ValueError("potential has the wrong length")
    if np.any(V < 0):
        raise OperatorError("potential must be non-negative")
    return V


def build_operator(space: Space, kind: str, boundary: str = "dirichlet", *,
                   c: float = 0.0, potential=None, m_pow: int = 2) -> np.ndarray:
    """Assemble the matrix of a model operator acting on functions on ``space``.

    kind is one of ``shift`` (``c I``), ``laplacian``, ``schrodinger``
    (laplacian plus ``diag(V)``) or ``fractional`` (``(-Delta_h)**(m_pow/2)``
    plus ``diag(V)``, built through the eigendecomposition of ``-Delta_h``).
    """
    if kind == "shift":
        if c < 0:
            raise OperatorError("shift must be non-negative")
        return c * np.eye(space.size)
    if kind == "laplacian":
        return grid_laplacian(space, boundary)
    if kind == "schrodinger":
        return grid_laplacian(space, boundary) + np.diag(potential_values(space, potential))
    if kind == "fractional":
        if int(m_pow) != m_pow or m_pow < 2 or m_pow % 2:
            raise OperatorError(f"m_pow must be an even integer >= 2, got {m_pow}")
        lap = grid_laplacian(space, boundary)
        lam, vec = np.linalg.eigh(lap)
        lam = np.clip(lam, 0.0, None)
        A = (vec * lam ** (m_pow / 2)) @ vec.T
        A = 0.5 * (A + A.T)
        return A + np.diag(potential_values(space, potential))
    raise ValueError(f"unknown operator kind {kind!r}")


def build_from_descriptor(space: Space, desc: dict) -> np.ndarray:
    potential = desc.get("potential")
    if isinstance(potential, str):
        potential = {"name": potential, "omega": desc.get("omega", 1.0),
                     "value": desc.get("value", 0.0)}
    A = build_operator(space, desc["kind"], desc.get("boundary", "dirichlet"),
                       c=float(desc.get("c", 0.0)), potential=potential,
                       m_pow=int(desc.get("m_pow", 2)))
    shift = float(desc.get("shift", 0.0))
    if shift:
        A = A + shift * np.eye(space.size)
    return A


def spectral_decompose(matrix: np.ndarray, space: Space, m: float = 2.0,
                       gap_tol: float | None = None, tol_eig: float | None = None,
                       descriptor: dict | None = None) -> SpectralOperator:
    """Diagonalise an operator that is self-adjoint for the weighted inner product.

    The similarity ``D^{1/2} A D^{-1/2}`` with ``D = diag(mu)`` is plain
    symmetric; its eigenvectors are mapped back with ``D^{-1/2}``.
    """
    A = np.asarray(matrix, dtype=float)
    P = space.size
    if A.shape != (P, P):
        raise ValueError(f"matrix shape {A.shape} does not match space of size {P}")
    if m < 1:
        raise ValueError("order must be at least 1")
    mu = space.mass
    S = mu[:, None] * A
    scale = max(float(np.abs(S).max()), np.finfo(float).tiny)
    defect = float(np.abs(S - S.T).max()) / scale
    if defect > 1e-10:
        raise OperatorError(f"matrix is not self-adjoint in L^2(mu): defect {defect:.3e}")
    s = np.sqrt(mu)
    C = s[:, None] * A / s[None, :]
    C = 0.5 * (C + C.T)
    lam, psi = np.linalg.eigh(C)
    top = float(np.abs(lam).max())
    if tol_eig is None:
        tol_eig = 1e-9 * top
    if lam[0] < -tol_eig:
        raise OperatorError(f"operator is not non-negative: eigenvalue {lam[0]:.6e}")
    lam = np.where(lam < 0, 0.0, lam)
    phi = psi / s[:, None]
    if gap_tol is None:
        gap_tol = 1e-10 * float(lam.max())

    gram = phi.T @ (mu[:, None] * phi)
    ortho = float(np.abs(gram - np.eye(P)).max())
    defect_cols = A @ phi - phi * lam
    recon = float(np.sqrt((mu[:, None] * defect_cols ** 2).sum(axis=0)).max()) / max(
        top, np.finfo(float).tiny)
    return SpectralOperator(lam, phi, float(m), space, A, float(gap_tol),
                            dict(descriptor or {}),
                            {"orthonormality": ortho, "reconstruction": recon,
                             "symmetry": defect})


def descriptor_hash(space: Space, desc: dict, m: float) -> str:
    payload = json.dumps({"space": space.generator or space.mass.tolist(),
                          "operator": desc, "order": m}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def decompose_cached(space: Space, desc: dict, m: float = 2.0,
                     cache_dir: str | Path | None = None) -> SpectralOperator:
    """``spectral_decompose`` of a descriptor, with eigendata kept in an ``.npz`` sidecar."""
    matrix = build_from_descriptor(space, desc)
    if cache_dir is None:
        return spectral_decompose(matrix, space, m, descriptor=desc)
    path = Path(cache_dir) / f"eig-{descriptor_hash(space, desc, m)}.npz"
    if path.exists():
        data = np.load(path)
        lam, phi = data["eigenvalues"], data["eigenvectors"]
        return SpectralOperator(lam, phi, float(m), space, matrix,
                                float(data["gap_tol"]), dict(desc), {})
    op = spectral_decompose(matrix, space, m, descriptor=desc)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, eigenvalues=op.eigenvalues, eigenvectors=op.eigenvectors,
             gap_tol=op.gap_tol)
    return op
