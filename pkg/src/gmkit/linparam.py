"""Per-(t, x) inner-product spaces and linear generator parameterizations.

A generator acts on a test function through a pairing
``L f(x) = <K(t,x) f, F(t, x)>`` in a finite-dimensional inner-product
space attached to each (t, x).  Metrics are euclidean or diagonal-weighted
(the jump-kernel case weights coordinates by hazards).  Finite expectations
commute with the pairing, which is what makes posterior averaging of
conditional targets produce a marginal parameterization.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .bregman import AtomicDistribution, DomainSpec
from .errors import DimensionMismatch, DomainViolation


@dataclass(frozen=True)
class InnerSpace:
    """R^dim with the euclidean or a diagonal-weighted inner product."""

    dim: int
    weights: Optional[tuple] = None  # None = euclidean

    def __post_init__(self):
        if self.dim < 1:
            raise DimensionMismatch("inner space dim must be >= 1")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if w.shape != (self.dim,):
                raise DimensionMismatch("one metric weight per coordinate")
            if np.any(w <= 0):
                raise DomainViolation("metric weights must be strictly positive")

    def weight_vector(self) -> np.ndarray:
        if self.weights is None:
            return np.ones(self.dim)
        return np.asarray(self.weights, dtype=float)


def euclidean(dim: int) -> InnerSpace:
    return InnerSpace(dim)


def diag_weighted(weights) -> InnerSpace:
    w = tuple(float(v) for v in np.atleast_1d(weights))
    return InnerSpace(len(w), w)


def pair(space: InnerSpace, kf, F) -> float:
    """<kf, F> under the space's metric."""
    kf = np.asarray(kf, dtype=float).reshape(-1)
    F = np.asarray(F, dtype=float).reshape(-1)
    if kf.shape != (space.dim,) or F.shape != (space.dim,):
        raise DimensionMismatch(f"expected dim {space.dim}, got {kf.shape} and {F.shape}")
    return float(np.sum(space.weight_vector() * kf * F))


def norm(space: InnerSpace, v) -> float:
    v = np.asarray(v, dtype=float).reshape(-1)
    return float(np.sqrt(np.sum(space.weight_vector() * v * v)))


@dataclass
class TestFunction:
    """Test function with optional gradient, tagged by catalog family."""

    eval: Callable
    family: str
    grad: Optional[Callable] = None


def finite_state_function(values) -> TestFunction:
    """On a finite space every vector of values is a valid test function."""
    vals = np.asarray(values, dtype=float)
    return TestFunction(eval=lambda idx: vals[idx], family="finite_state")


def gaussian_bump(center: float = 0.0, width: float = 1.0) -> TestFunction:
    c, s = float(center), float(width)

    def f(x):
        x = np.asarray(x, dtype=float)
        return np.exp(-((x - c) ** 2) / (2 * s * s))

    def g(x):
        x = np.asarray(x, dtype=float)
        return -(x - c) / (s * s) * f(x)

    return TestFunction(eval=f, grad=g, family="smooth_bump")


def poly_gaussian(degree: int = 1, scale: float = 1.0) -> TestFunction:
    k, s = int(degree), float(scale)

    def f(x):
        x = np.asarray(x, dtype=float)
        return x**k * np.exp(-(x * x) / (2 * s * s))

    def g(x):
        x = np.asarray(x, dtype=float)
        base = np.exp(-(x * x) / (2 * s * s))
        return (k * x ** (k - 1) if k > 0 else 0.0) * base - x ** (k + 1) / (s * s) * base

    return TestFunction(eval=f, grad=g, family="poly_gaussian")


@dataclass
class LinearParam:
    """Linear parameterization: space, test-function map, admissible set."""

    space_at: Callable[[float, object], InnerSpace]
    K_apply: Callable[[float, object, TestFunction], np.ndarray]
    admissible: Optional[Callable[[float, object], DomainSpec]] = None

    def generator_apply(self, t: float, x, f: TestFunction, F) -> float:
        return pair(self.space_at(t, x), self.K_apply(t, x, f), F)


def direct_sum(params: Sequence[LinearParam]) -> LinearParam:
    """Concatenated spaces and K outputs; pairing is additive across blocks."""
    params = list(params)
    if not params:
        raise DimensionMismatch("direct_sum needs at least one block")

    def space_at(t, x):
        dims = []
        wts = []
        weighted = False
        for p in params:
            s = p.space_at(t, x)
            dims.append(s.dim)
            wts.append(s.weight_vector())
            weighted = weighted or s.weights is not None
        if weighted:
            return diag_weighted(np.concatenate(wts))
        return euclidean(int(sum(dims)))

    def K_apply(t, x, f):
        return np.concatenate([np.atleast_1d(p.K_apply(t, x, f)) for p in params])

    def admissible(t, x):
        from .bregman import concat_domains

        doms = [p.admissible(t, x) for p in params]
        if any(d is None for d in doms):
            return None
        return concat_domains(doms)

    has_domains = all(p.admissible is not None for p in params)
    return LinearParam(space_at=space_at, K_apply=K_apply, admissible=admissible if has_domains else None)


def marginal_target(
    posterior: AtomicDistribution,
    cond_target: Callable[[np.ndarray], np.ndarray],
    domain: Optional[DomainSpec] = None,
) -> np.ndarray:
    """Posterior-weighted average of conditional targets.

    Convexity keeps the average inside the admissible set; membership is
    asserted when a domain is supplied.
    """
    targets = np.stack([np.atleast_1d(np.asarray(cond_target(z), dtype=float)) for z in posterior.points])
    if domain is not None:
        for z, tgt in zip(posterior.points, targets):
            if not domain.contains(tgt):
                raise DomainViolation(f"conditional target {tgt} for z={z} outside {domain.kind}")
    out = posterior.weights @ targets
    if domain is not None and not domain.contains(out, atol=1e-12):
        raise DomainViolation(f"marginal target {out} escaped {domain.kind}")
    return out


def commutation_check(
    space: InnerSpace,
    posterior: AtomicDistribution,
    kf,
    cond_target: Callable[[np.ndarray], np.ndarray],
) -> float:
    """|E_z <kf, F(z)> - <kf, E_z F(z)>| — zero for finite posteriors."""
    lhs = 0.0
    for z, w in zip(posterior.points, posterior.weights):
        lhs += w * pair(space, kf, cond_target(z))
    rhs = pair(space, kf, marginal_target(posterior, cond_target))
    return float(abs(lhs - rhs))


def check_linearity(
    param: LinearParam,
    t: float,
    x,
    f: TestFunction,
    g: TestFunction,
    a: float,
    b: float,
) -> float:
    """Residual of K(a f + b g) = a K f + b K g at one (t, x)."""
    combo = TestFunction(
        eval=lambda arg: a * np.asarray(f.eval(arg), float) + b * np.asarray(g.eval(arg), float),
        grad=(lambda arg: a * np.asarray(f.grad(arg), float) + b * np.asarray(g.grad(arg), float))
        if (f.grad is not None and g.grad is not None)
        else None,
        family=f.family,
    )
    lhs = np.atleast_1d(param.K_apply(t, x, combo))
    rhs = a * np.atleast_1d(param.K_apply(t, x, f)) + b * np.atleast_1d(param.K_apply(t, x, g))
    return float(np.max(np.abs(lhs - rhs)))
