"""Bregman divergence families and their expectation identities.

A divergence is specified by a strictly convex potential on a closed convex
domain.  Potentials of type (i) are differentiable on the whole domain; type
(ii) potentials (Poisson, binary cross entropy) are continuous on the domain
but differentiable only on its relative interior, so the second slot of the
divergence is restricted to strictly interior points.

Families implemented: squared error on R^n, the Poisson potential
``x log x`` on the nonnegative orthant, binary cross entropy on the unit
box, plus two compositions:

* separable: componentwise sum of families on the concatenated domain,
* time-scaled: ``w(t)`` times a base divergence, which is again a Bregman
  divergence for every t with ``w(t) > 0``.

The module also provides the two workhorse identities behind conditional
loss training: the conditional expectation of ``D(X, y)`` is minimized at
``E[X]``, and it decomposes as ``D(E[X], y)`` plus a y-independent spread
term.  Both are exposed as numeric checks with independent search oracles.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    DomainViolation,
    InteriorViolation,
    MeanOnBoundary,
    MixedDomainTypes,
    NonpositiveWeight,
    NumericalInconsistency,
)

# Margin used for "strictly interior" checks near log/ratio poles.
INTERIOR_MARGIN = 1e-12
# Evaluations in [-NEG_CLAMP, 0) are treated as cancellation noise.
NEG_CLAMP = 1e-12

FULL = "full"
RELATIVE_INTERIOR = "relative_interior"


# ---------------------------------------------------------------------------
# Domains
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DomainSpec:
    """Closed convex admissible set with its differentiability type."""

    kind: str  # whole_space | box | nonneg_orthant | unit_interval_product
    dim: int
    domain_type: str = FULL
    lo: Optional[tuple] = None
    hi: Optional[tuple] = None

    def __post_init__(self):
        if self.dim < 1:
            raise DomainViolation(f"domain dim must be >= 1, got {self.dim}")
        if self.domain_type not in (FULL, RELATIVE_INTERIOR):
            raise DomainViolation(f"unknown domain_type {self.domain_type!r}")
        if self.kind == "box":
            lo = np.asarray(self.lo, dtype=float)
            hi = np.asarray(self.hi, dtype=float)
            if lo.shape != (self.dim,) or hi.shape != (self.dim,):
                raise DimensionMismatch("box bounds must match dim")
            if not np.all(lo < hi):
                raise DomainViolation("box requires lo < hi componentwise")

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """(lo, hi) with +-inf for unbounded sides."""
        if self.kind == "whole_space":
            return -np.inf * np.ones(self.dim), np.inf * np.ones(self.dim)
        if self.kind == "nonneg_orthant":
            return np.zeros(self.dim), np.inf * np.ones(self.dim)
        if self.kind == "unit_interval_product":
            return np.zeros(self.dim), np.ones(self.dim)
        return np.asarray(self.lo, dtype=float), np.asarray(self.hi, dtype=float)

    def contains(self, a: np.ndarray, atol: float = 0.0) -> bool:
        a = np.asarray(a, dtype=float)
        lo, hi = self.bounds()
        return bool(np.all(np.isfinite(a)) and np.all(a >= lo - atol) and np.all(a <= hi + atol))

    def strictly_inside(self, b: np.ndarray, margin: float = INTERIOR_MARGIN) -> bool:
        """Interior membership; for full domains this is plain membership."""
        b = np.asarray(b, dtype=float)
        if self.domain_type == FULL:
            return self.contains(b)
        lo, hi = self.bounds()
        lo = np.where(np.isfinite(lo), lo + margin, lo)
        hi = np.where(np.isfinite(hi), hi - margin, hi)
        return bool(np.all(np.isfinite(b)) and np.all(b >= lo) and np.all(b <= hi))


def whole_space(dim: int) -> DomainSpec:
    return DomainSpec("whole_space", dim, FULL)


def nonneg_orthant(dim: int) -> DomainSpec:
    return DomainSpec("nonneg_orthant", dim, RELATIVE_INTERIOR)


def unit_interval_product(dim: int) -> DomainSpec:
    return DomainSpec("unit_interval_product", dim, RELATIVE_INTERIOR)


def box(lo, hi, domain_type: str = FULL) -> DomainSpec:
    lo = tuple(float(v) for v in np.atleast_1d(lo))
    hi = tuple(float(v) for v in np.atleast_1d(hi))
    return DomainSpec("box", len(lo), domain_type, lo, hi)


def concat_domains(domains: Sequence[DomainSpec]) -> DomainSpec:
    """Product of domains, represented as a box with the union type."""
    types = {d.domain_type for d in domains}
    if len(types) != 1:
        raise MixedDomainTypes("separable components must share a domain type")
    lo = np.concatenate([d.bounds()[0] for d in domains])
    hi = np.concatenate([d.bounds()[1] for d in domains])
    return DomainSpec("box", int(lo.size), types.pop(), tuple(lo), tuple(hi))


# ---------------------------------------------------------------------------
# Divergence specs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DivergenceSpec:
    """One member of the divergence catalog, with its admissible domain."""

    family: str  # mse | poisson | bce | time_scaled | separable
    domain: DomainSpec
    base: Optional["DivergenceSpec"] = None
    weight: Optional[Callable[[float], float]] = None
    components: tuple = ()

    @property
    def dim(self) -> int:
        return self.domain.dim

    def is_time_indexed(self) -> bool:
        if self.family == "time_scaled":
            return True
        return any(c.is_time_indexed() for c in self.components)


def mse(dim: int = 1) -> DivergenceSpec:
    return DivergenceSpec("mse", whole_space(dim))


def poisson(dim: int = 1) -> DivergenceSpec:
    return DivergenceSpec("poisson", nonneg_orthant(dim))


def bce(dim: int = 1) -> DivergenceSpec:
    return DivergenceSpec("bce", unit_interval_product(dim))


def make_separable(components: Sequence[DivergenceSpec]) -> DivergenceSpec:
    """Componentwise sum acting on the concatenated domain."""
    components = tuple(components)
    if not components:
        raise DimensionMismatch("separable needs at least one component")
    domain = concat_domains([c.domain for c in components])
    return DivergenceSpec("separable", domain, components=components)


def make_time_scaled(base: DivergenceSpec, w: Callable[[float], float]) -> DivergenceSpec:
    """w(t) * base; evaluation requires a time argument."""
    return DivergenceSpec("time_scaled", base.domain, base=base, weight=w)


# ---------------------------------------------------------------------------
# Evaluation (batched core, scalar wrappers)
# ---------------------------------------------------------------------------


def _as_batch(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.ndim == 0:
        v = v.reshape(1, 1)
    elif v.ndim == 1:
        v = v.reshape(1, -1)
    return v


def _check_first_slot(domain: DomainSpec, a: np.ndarray) -> None:
    lo, hi = domain.bounds()
    if not (np.all(np.isfinite(a)) and np.all(a >= lo) and np.all(a <= hi)):
        raise DomainViolation(f"first argument outside {domain.kind}")


def _check_second_slot(domain: DomainSpec, b: np.ndarray, margin: float) -> None:
    lo, hi = domain.bounds()
    if not np.all(np.isfinite(b)):
        raise InteriorViolation("second argument not finite")
    if domain.domain_type == RELATIVE_INTERIOR:
        lo = np.where(np.isfinite(lo), lo + margin, lo)
        hi = np.where(np.isfinite(hi), hi - margin, hi)
        if not (np.all(b >= lo) and np.all(b <= hi)):
            raise InteriorViolation(f"second argument not strictly inside {domain.kind}")
    else:
        if not (np.all(b >= lo) and np.all(b <= hi)):
            raise DomainViolation(f"second argument outside {domain.kind}")


def _xlogx(v: np.ndarray) -> np.ndarray:
    # continuous extension 0*log(0) = 0
    out = np.zeros_like(v)
    pos = v > 0
    out[pos] = v[pos] * np.log(v[pos])
    return out


def _eval_core(spec: DivergenceSpec, a: np.ndarray, b: np.ndarray, t) -> np.ndarray:
    if spec.family == "mse":
        return np.sum((a - b) ** 2, axis=1)
    if spec.family == "poisson":
        # b - a + a log(a/b), with a log a extended by 0 at a = 0
        with np.errstate(divide="ignore", invalid="ignore"):
            cross = np.where(a > 0, a * np.log(b), 0.0)
        return np.sum(b - a + _xlogx(a) - cross, axis=1)
    if spec.family == "bce":
        with np.errstate(divide="ignore", invalid="ignore"):
            c1 = np.where(a > 0, a * np.log(b), 0.0)
            c2 = np.where(a < 1, (1 - a) * np.log(1 - b), 0.0)
        return np.sum(_xlogx(a) + _xlogx(1 - a) - c1 - c2, axis=1)
    if spec.family == "time_scaled":
        w = _weight_at(spec, t)
        return w * _eval_core(spec.base, a, b, t)
    if spec.family == "separable":
        total = np.zeros(a.shape[0])
        off = 0
        for comp in spec.components:
            d = comp.dim
            total = total + _eval_core(comp, a[:, off : off + d], b[:, off : off + d], t)
            off += d
        return total
    raise DomainViolation(f"unknown family {spec.family!r}")


def _grad_core(spec: DivergenceSpec, a: np.ndarray, b: np.ndarray, t) -> np.ndarray:
    if spec.family == "mse":
        return 2.0 * (b - a)
    if spec.family == "poisson":
        return 1.0 - a / b
    if spec.family == "bce":
        return (b - a) / (b * (1.0 - b))
    if spec.family == "time_scaled":
        w = _weight_at(spec, t)
        if w.ndim == 1:
            w = w[:, None]
        return w * _grad_core(spec.base, a, b, t)
    if spec.family == "separable":
        parts = []
        off = 0
        for comp in spec.components:
            d = comp.dim
            parts.append(_grad_core(comp, a[:, off : off + d], b[:, off : off + d], t))
            off += d
        return np.concatenate(parts, axis=1)
    raise DomainViolation(f"unknown family {spec.family!r}")


def _weight_at(spec: DivergenceSpec, t) -> np.ndarray:
    """Scalar or per-row weight of a time-scaled divergence."""
    if t is None:
        raise NonpositiveWeight("time-scaled divergence needs a time argument")
    w = np.asarray(spec.weight(np.asarray(t, dtype=float)), dtype=float)
    if np.any(w <= 0.0):
        raise NonpositiveWeight(f"weight not positive at t={t!r}")
    return w


def eval_batch(
    spec: DivergenceSpec,
    a: np.ndarray,
    b: np.ndarray,
    t=None,
    margin: float = INTERIOR_MARGIN,
) -> np.ndarray:
    """Vectorized divergence over rows of a and b; shared domain checks."""
    a = _as_batch(a)
    b = _as_batch(b)
    if a.shape != b.shape or a.shape[1] != spec.dim:
        raise DimensionMismatch(f"expected rows of dim {spec.dim}, got {a.shape} vs {b.shape}")
    _check_first_slot(spec.domain, a)
    _check_second_slot(spec.domain, b, margin)
    vals = _eval_core(spec, a, b, t)
    bad = vals < -NEG_CLAMP
    if np.any(bad):
        raise NumericalInconsistency(f"divergence evaluated to {vals[bad].min():.3e} < -{NEG_CLAMP}")
    return np.maximum(vals, 0.0)


def grad_b_batch(
    spec: DivergenceSpec,
    a: np.ndarray,
    b: np.ndarray,
    t=None,
    margin: float = INTERIOR_MARGIN,
) -> np.ndarray:
    """Vectorized gradient of D(a, .) in the second slot."""
    a = _as_batch(a)
    b = _as_batch(b)
    if a.shape != b.shape or a.shape[1] != spec.dim:
        raise DimensionMismatch(f"expected rows of dim {spec.dim}, got {a.shape} vs {b.shape}")
    _check_first_slot(spec.domain, a)
    _check_second_slot(spec.domain, b, margin)
    return _grad_core(spec, a, b, t)


def breg_eval(spec: DivergenceSpec, a, b, t=None, margin: float = INTERIOR_MARGIN) -> float:
    """D(a, b) = phi(a) - phi(b) - <a - b, grad phi(b)> in closed form."""
    return float(eval_batch(spec, a, b, t=t, margin=margin)[0])


def breg_grad_b(spec: DivergenceSpec, a, b, t=None, margin: float = INTERIOR_MARGIN) -> np.ndarray:
    """Gradient of D(a, .) at b, closed form per family."""
    return grad_b_batch(spec, a, b, t=t, margin=margin)[0]


# ---------------------------------------------------------------------------
# Atomic distributions and the expectation identities
# ---------------------------------------------------------------------------


@dataclass
class AtomicDistribution:
    """Finitely supported law: rows of `points` with matching `weights`."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        self.weights = np.asarray(self.weights, dtype=float)
        if self.points.shape[0] != self.weights.shape[0]:
            raise DimensionMismatch("one weight per atom required")
        if np.any(self.weights < 0):
            raise DomainViolation("weights must be nonnegative")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise DomainViolation(f"weights sum to {self.weights.sum()!r}, not 1")

    @property
    def n_atoms(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def mean(self) -> np.ndarray:
        return self.weights @ self.points

    def check_in_domain(self, domain: DomainSpec) -> None:
        for p in self.points:
            if not domain.contains(p):
                raise DomainViolation(f"atom {p} outside {domain.kind}")


def expected_divergence(spec: DivergenceSpec, dist: AtomicDistribution, y, t=None) -> float:
    """E[D(X, y)] over the atoms."""
    y = np.asarray(y, dtype=float).reshape(1, -1)
    ys = np.repeat(y, dist.n_atoms, axis=0)
    vals = eval_batch(spec, dist.points, ys, t=t)
    return float(dist.weights @ vals)


@dataclass
class SearchConfig:
    """Search settings for the minimizer oracle.

    Dense grids are the canonical oracle in one and two dimensions; higher
    dimensions fall back to descent on finite-difference gradients of the
    objective (never the closed-form divergence gradient).
    """

    lo: Optional[np.ndarray] = None
    hi: Optional[np.ndarray] = None
    grid_points: int = 2001
    max_iter: int = 500
    step_tol: float = 1e-10

    def resolved_bounds(self, spec: DivergenceSpec, dist: AtomicDistribution):
        if self.lo is not None and self.hi is not None:
            return np.asarray(self.lo, float), np.asarray(self.hi, float)
        lo_d, hi_d = spec.domain.bounds()
        span = dist.points.max(axis=0) - dist.points.min(axis=0)
        pad = 0.5 * np.maximum(span, 1.0)
        lo = np.maximum(dist.points.min(axis=0) - pad, lo_d + 1e-6)
        hi = np.minimum(dist.points.max(axis=0) + pad, hi_d - 1e-6)
        return lo, hi

    def resolution(self, lo, hi) -> float:
        return float(np.max((hi - lo) / (self.grid_points - 1)))


def expectation_minimizer_check(
    spec: DivergenceSpec,
    dist: AtomicDistribution,
    search: Optional[SearchConfig] = None,
    t=None,
) -> tuple[np.ndarray, float]:
    """Locate argmin_y E[D(X, y)] by search and report its gap to the mean.

    The searched minimizer must land within one grid resolution of the
    analytic mean; the gap is returned for the caller to assert.
    """
    dist.check_in_domain(spec.domain)
    mean = dist.mean()
    if not spec.domain.strictly_inside(mean):
        raise MeanOnBoundary(f"mean {mean} not strictly inside {spec.domain.kind}")
    search = search or SearchConfig()
    dim = dist.dim

    def objective(y_rows: np.ndarray) -> np.ndarray:
        out = np.zeros(y_rows.shape[0])
        for p, w in zip(dist.points, dist.weights):
            out += w * eval_batch(spec, np.repeat(p.reshape(1, -1), y_rows.shape[0], axis=0), y_rows, t=t)
        return out

    lo, hi = search.resolved_bounds(spec, dist)
    if dim <= 2:
        npts = search.grid_points if dim == 1 else max(int(np.sqrt(search.grid_points)), 201)
        axes = [np.linspace(lo[i], hi[i], npts) for i in range(dim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        grid = np.stack([m.ravel() for m in mesh], axis=1)
        vals = objective(grid)
        best = grid[int(np.argmin(vals))]
        resolution = float(np.max([(hi[i] - lo[i]) / (npts - 1) for i in range(dim)]))
    else:
        best = _descent_min(objective, 0.5 * (lo + hi), lo, hi, search)
        resolution = search.step_tol * 100
    gap = float(np.linalg.norm(best - mean))
    return best, gap


def _descent_min(objective, y0, lo, hi, search: SearchConfig) -> np.ndarray:
    """Backtracking descent on finite-difference gradients of the objective."""
    y = np.asarray(y0, dtype=float).copy()
    h = 1e-6
    step = 0.5
    f = float(objective(y.reshape(1, -1))[0])
    for _ in range(search.max_iter):
        g = np.zeros_like(y)
        for i in range(y.size):
            e = np.zeros_like(y)
            e[i] = h
            fp = float(objective(np.clip(y + e, lo, hi).reshape(1, -1))[0])
            fm = float(objective(np.clip(y - e, lo, hi).reshape(1, -1))[0])
            g[i] = (fp - fm) / (2 * h)
        if np.linalg.norm(g) < 1e-12:
            break
        while step > search.step_tol:
            trial = np.clip(y - step * g, lo, hi)
            ft = float(objective(trial.reshape(1, -1))[0])
            if ft < f:
                y, f = trial, ft
                step *= 1.5
                break
            step *= 0.5
        if step <= search.step_tol:
            break
    return y


def pythagorean_check(spec: DivergenceSpec, dist: AtomicDistribution, y, t=None) -> float:
    """|E[D(X,y)] - D(E[X],y) - E[D(X,E[X])]|, all terms in closed form."""
    dist.check_in_domain(spec.domain)
    mean = dist.mean()
    if not spec.domain.strictly_inside(mean):
        raise MeanOnBoundary(f"mean {mean} not strictly inside {spec.domain.kind}")
    y = np.asarray(y, dtype=float).reshape(-1)
    lhs = expected_divergence(spec, dist, y, t=t)
    spread = expected_divergence(spec, dist, mean, t=t)
    mid = breg_eval(spec, mean, y, t=t)
    return float(abs(lhs - mid - spread))
