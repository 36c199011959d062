"""Finite metric measure spaces, closed balls, dyadic annuli and doubling fits.

A :class:`Space` is a finite set of points with a dense distance table and a
strictly positive point mass.  Balls are closed, ``B(x, r) = {y : d(x, y) <= r}``,
so every ball contains its centre and has positive measure.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np

__all__ = [
    "Ball",
    "DoublingFit",
    "Space",
    "annuli",
    "ball_members",
    "build_grid_space",
    "doubling_exponent",
    "make_space",
    "space_from_json",
    "space_to_json",
]

MAX_POINTS = 4096
DOUBLING_FACTORS = (2.0, 4.0, 8.0)

# Relative slack on ``d <= r`` so grid distances that are exact in real
# arithmetic stay inside the ball after rounding.
_BALL_RTOL = 1e-12


@dataclass(frozen=True)
class Ball:
    center: int
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError(f"ball radius must be positive, got {self.radius}")

    def scaled(self, alpha: float) -> "Ball":
        """The concentric ball ``alpha * B``."""
        return Ball(self.center, alpha * self.radius)


@dataclass(frozen=True)
class DoublingFit:
    n: float
    constant: float
    stderr: float
    degenerate: bool
    samples: int


@dataclass(frozen=True, eq=False)
class Space:
    """Finite doubling metric measure space.

    ``n`` and ``doubling_constant`` are the fitted pair ``(n, C_d)`` with
    ``mu(alpha B) <= C_d alpha**n mu(B)`` on the sample used to build the space.
    """

    points: np.ndarray
    metric: np.ndarray
    mass: np.ndarray
    doubling: DoublingFit
    generator: dict = field(default_factory=dict)

    @property
    def n(self) -> float:
        return self.doubling.n

    @property
    def doubling_constant(self) -> float:
        return self.doubling.constant

    @property
    def size(self) -> int:
        return self.mass.shape[0]

    @property
    def total_mass(self) -> float:
        return float(self.mass.sum())

    @property
    def diameter(self) -> float:
        return float(self.metric.max())

    def ball_mask(self, ball: Ball) -> np.ndarray:
        return _within(self.metric[ball.center], ball.radius)

    def measure(self, mask: np.ndarray) -> float:
        return float(self.mass[mask].sum())

    def ball_measure(self, ball: Ball) -> float:
        return self.measure(self.ball_mask(ball))


def _within(dist: np.ndarray, radius: float) -> np.ndarray:
    return dist <= radius * (1.0 + _BALL_RTOL)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def _check_metric(metric: np.ndarray, atol: float = 1e-12, max_triples: int = 20000,
                  seed: int = 0) -> None:
    if metric.ndim != 2 or metric.shape[0] != metric.shape[1]:
        raise ValueError("metric must be a square table")
    scale = max(float(np.abs(metric).max()), 1.0)
    if np.any(metric < -atol * scale):
        raise ValueError("metric has negative entries")
    if np.any(np.abs(np.diag(metric)) > atol * scale):
        raise ValueError("metric diagonal must vanish")
    if not np.allclose(metric, metric.T, rtol=0, atol=atol * scale):
        raise ValueError("metric is not symmetric")
    P = metric.shape[0]
    if P < 3:
        return
    rng = np.random.default_rng(seed)
    i, j, k = rng.integers(0, P, size=(3, max_triples))
    slack = metric[i, j] + metric[j, k] - metric[i, k]
    if np.any(slack < -1e-9 * scale):
        raise ValueError("metric violates the triangle inequality")


def make_space(points: np.ndarray, metric: np.ndarray, mass: np.ndarray,
               generator: dict | None = None,
               sample: Sequence[Ball] | None = None) -> Space:
    """Validate the raw tables and fit the doubling pair on ``sample``.

    Without a sample, balls around every point with radii spread between the
    smallest positive distance and an eighth of the diameter are used.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points[:, None]
    metric = np.asarray(metric, dtype=float)
    mass = np.asarray(mass, dtype=float)
    P = mass.shape[0]
    if P == 0:
        raise ValueError("empty space")
    if P > MAX_POINTS:
        raise ValueError(f"dense metric supports at most {MAX_POINTS} points, got {P}")
    if metric.shape != (P, P) or points.shape[0] != P:
        raise ValueError("points, metric and mass disagree in size")
    if np.any(~np.isfinite(mass)) or np.any(mass <= 0):
        raise ValueError("point masses must be finite and strictly positive")
    _check_metric(metric)
    raw = Space(_frozen(points), _frozen(metric), _frozen(mass),
                DoublingFit(0.0, 1.0, 0.0, True, 0), dict(generator or {}))
    if sample is None:
        sample = _default_sample(raw)
    fit = doubling_exponent(raw, sample) if len(sample) else DoublingFit(0.0, 1.0, 0.0, True, 0)
    return Space(raw.points, raw.metric, raw.mass, fit, raw.generator)


def _default_sample(space: Space, max_centers: int = 16) -> list[Ball]:
    P = space.size
    if P == 1:
        return [Ball(0, 1.0)]
    positive = space.metric[space.metric > 0]
    h = float(positive.min())
    diam = space.diameter
    gen = space.generator
    if gen.get("kind") == "grid":
        # interior centres: 8B stays inside the box
        lo = gen["origin"] + gen["extent"] / 4
        hi = gen["origin"] + gen["extent"] * 3 / 4
        inside = np.all((space.points >= lo) & (space.points <= hi), axis=1)
        candidates = np.flatnonzero(inside)
        top = gen["extent"] / 32
    else:
        candidates = np.arange(P)
        top = diam / 16
    if candidates.size == 0:
        candidates = np.arange(P)
    centers = candidates[np.linspace(0, candidates.size - 1,
                                     min(max_centers, candidates.size)).astype(int)]
    radii = np.geomspace(h, max(h, top), 4)
    return [Ball(int(c), float(r)) for c in np.unique(centers) for r in np.unique(radii)]


def build_grid_space(dims: int, extent: float, count: int, origin: float = 0.0,
                     sample: Sequence[Ball] | None = None) -> Space:
    """Uniform cell-centred grid on ``[origin, origin + extent]**dims``.

    Spacing is ``h = extent / count``, every point carries mass ``h**dims`` and
    the metric is Euclidean.
    """
    if dims not in (1, 2):
        raise ValueError(f"dims must be 1 or 2, got {dims}")
    if count < 1:
        raise ValueError("count must be at least 1")
    if not extent > 0:
        raise ValueError("extent must be positive")
    h = extent / count
    axis = origin + (np.arange(count) + 0.5) * h
    if dims == 1:
        pts = axis[:, None]
    else:
        X, Y = np.meshgrid(axis, axis, indexing="ij")
        pts = np.column_stack([X.ravel(), Y.ravel()])
    diff = pts[:, None, :] - pts[None, :, :]
    metric = np.sqrt((diff ** 2).sum(axis=-1))
    mass = np.full(pts.shape[0], h ** dims)
    gen = {"kind": "grid", "dims": dims, "extent": float(extent), "count": int(count),
           "origin": float(origin)}
    return make_space(pts, metric, mass, generator=gen, sample=sample)


def ball_members(space: Space, ball: Ball) -> np.ndarray:
    """Indices of the closed ball, sorted; always contains the centre."""
    if not 0 <= ball.center < space.size:
        raise IndexError(f"center {ball.center} outside space of size {space.size}")
    return np.flatnonzero(space.ball_mask(ball))


def annulus_masks(space: Space, ball: Ball, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Boolean masks of ``C_k(B)`` and its fattened version ``C_k*(B)``."""
    if k < 0:
        raise ValueError("k must be non-negative")
    d = space.metric[ball.center]
    r = ball.radius
    if k == 0:
        inner = _within(d, r)
        star = _within(d, 2 * r)
    else:
        inner = _within(d, 2 ** k * r) & ~_within(d, 2 ** (k - 1) * r)
        if k == 1:
            star = _within(d, 4 * r)
        else:
            star = _within(d, 2 ** (k + 1) * r) & ~_within(d, 2 ** (k - 2) * r)
    return inner, star


def annuli(space: Space, ball: Ball, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Index sets of ``C_k(B)`` and ``C_k*(B)``."""
    inner, star = annulus_masks(space, ball, k)
    return np.flatnonzero(inner), np.flatnonzero(star)


def last_annulus(space: Space, ball: Ball) -> int:
    """Smallest k with ``2**k B`` covering the whole space."""
    reach = float(space.metric[ball.center].max())
    if reach <= ball.radius:
        return 0
    return int(np.ceil(np.log2(reach / ball.radius) - 1e-12))


def doubling_exponent(space: Space, sample: Iterable[Ball]) -> DoublingFit:
    """Least-squares fit of ``log(mu(aB)/mu(B))`` against ``log a`` for a in 2, 4, 8.

    The returned constant is the smallest ``C_d`` for which the fitted ``n``
    satisfies the doubling inequality on every sampled ball.  A sample where
    no ball ever grows is degenerate: ``n = 0`` and the fit is flagged.
    """
    sample = list(sample)
    if not sample:
        raise ValueError("doubling fit needs a non-empty sample")
    logs_a, logs_r = [], []
    for ball in sample:
        base = space.ball_measure(ball)
        for a in DOUBLING_FACTORS:
            logs_a.append(np.log(a))
            logs_r.append(np.log(space.ball_measure(ball.scaled(a)) / base))
    la = np.array(logs_a)
    lr = np.array(logs_r)
    if np.allclose(lr, 0.0):
        return DoublingFit(0.0, 1.0, 0.0, True, len(sample))
    A = np.column_stack([np.ones_like(la), la])
    coef, *_ = np.linalg.lstsq(A, lr, rcond=None)
    n = max(float(coef[1]), 0.0)
    resid = lr - A @ coef
    dof = max(la.size - 2, 1)
    sxx = float(((la - la.mean()) ** 2).sum())
    stderr = float(np.sqrt((resid ** 2).sum() / dof / sxx)) if sxx > 0 else float("inf")
    constant = float(np.exp((lr - n * la).max()))
    return DoublingFit(n, max(constant, 1.0), stderr, False, len(sample))


def space_to_json(space: Space) -> str:
    doc: dict[str, Any] = {
        "schema_version": 1,
        "points": space.points.tolist(),
        "mass": space.mass.tolist(),
        "generator": space.generator or None,
        "doubling": {"n": space.n, "constant": space.doubling_constant,
                     "stderr": space.doubling.stderr,
                     "degenerate": space.doubling.degenerate},
    }
    if not space.generator:
        doc["metric"] = space.metric.tolist()
    return json.dumps(doc)


def space_from_json(text: str) -> Space:
    doc = json.loads(text)
    gen = doc.get("generator")
    if gen and gen.get("kind") == "grid":
        return build_grid_space(gen["dims"], gen["extent"], gen["count"], gen["origin"])
    if "metric" not in doc:
        raise ValueError("space document has neither a metric nor a known generator")
    return make_space(np.array(doc["points"]), np.array(doc["metric"]), np.array(doc["mass"]))
