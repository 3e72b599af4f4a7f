"""Time distributions on [0,1], weighting functions, and reweighting.

A training-time law must put positive mass on every positive-length subset
of [0,1].  That property cannot be decided from finitely many density
queries, so distributions here carry a declared finite exception set (points
where the density may vanish) and a grid scan checks positivity everywhere
else.  Weight functions follow the same convention.

``reweight`` folds a weight into the time law: the tilted density is
``w(t) d(t) / K`` with ``K`` the quadrature mass of ``w`` under the law, and
expectations satisfy ``E_dist[w f] = K * E_tilted[f]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np
from scipy import special

from .errors import DomainViolation, UnboundedWeight, ZeroMass
from .streams import substream

SIMPSON_PANELS = 10_000
# Densities that blow up at the endpoints are evaluated just inside.
ENDPOINT_SHIFT = 1e-9


def simpson_grid(panels: int = SIMPSON_PANELS) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and composite-Simpson weights on [0,1], endpoints shifted inward."""
    if panels % 2:
        panels += 1
    ts = np.linspace(0.0, 1.0, panels + 1)
    wts = np.ones(panels + 1)
    wts[1:-1:2] = 4.0
    wts[2:-1:2] = 2.0
    wts *= 1.0 / (3.0 * panels)
    ts = ts.copy()
    ts[0] = ENDPOINT_SHIFT
    ts[-1] = 1.0 - ENDPOINT_SHIFT
    return ts, wts


def simpson_integral(fn: Callable[[np.ndarray], np.ndarray], panels: int = SIMPSON_PANELS) -> float:
    ts, wts = simpson_grid(panels)
    return float(wts @ np.asarray(fn(ts), dtype=float))


@dataclass
class WeightFn:
    """Nonnegative weight, positive off a declared finite exception set."""

    fn: Callable[[np.ndarray], np.ndarray]
    name: str = "weight"
    exception_set: tuple = ()

    def __call__(self, t):
        return np.asarray(self.fn(np.asarray(t, dtype=float)), dtype=float)


def const_weight(c: float = 1.0) -> WeightFn:
    if c <= 0:
        raise DomainViolation("constant weight must be positive")
    return WeightFn(lambda t: np.full_like(np.asarray(t, float), c), f"const({c:g})")


def linear_weight(coef: float = 2.0) -> WeightFn:
    return WeightFn(lambda t: coef * np.asarray(t, float), f"linear({coef:g})", exception_set=(0.0,))


def eps_regularized_weight(eps: float = 0.1) -> WeightFn:
    """1 / (1 - t + eps)^2: finite-at-1 variant of the endpoint weighting."""
    return WeightFn(lambda t: 1.0 / (1.0 - np.asarray(t, float) + eps) ** 2, f"eps_reg({eps:g})")


def sin_pi_weight() -> WeightFn:
    return WeightFn(lambda t: np.sin(np.pi * np.asarray(t, float)), "sin_pi", exception_set=(0.0, 1.0))


@dataclass
class TimeDistribution:
    """Density on [0,1] with a counter-based sampler.

    ``sample(seed, index)`` is a pure function of its arguments: workers
    covering disjoint index ranges reproduce exactly the same draws as a
    single sequential pass.
    """

    name: str
    density: Callable[[np.ndarray], np.ndarray]
    sample_block: Callable[[np.random.Generator, int], np.ndarray]
    exception_set: tuple = ()
    norm_tol: float = 1e-6

    def __post_init__(self):
        total = self.normalization_check()
        if abs(total - 1.0) > self.norm_tol:
            raise DomainViolation(f"{self.name}: density integrates to {total!r}, not 1")

    def pdf(self, t) -> np.ndarray:
        return np.asarray(self.density(np.asarray(t, dtype=float)), dtype=float)

    def normalization_check(self, panels: int = SIMPSON_PANELS) -> float:
        return simpson_integral(self.pdf, panels)

    def sample(self, seed: int, index: int) -> float:
        return float(self.sample_block(substream(seed, index), 1)[0])

    def sample_n(self, seed: int, stream: int, n: int) -> np.ndarray:
        return self.sample_block(substream(seed, stream), n)

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.sample_block(rng, n)


def uniform() -> TimeDistribution:
    return TimeDistribution(
        "uniform",
        density=lambda t: np.ones_like(t),
        sample_block=lambda rng, n: rng.random(n),
    )


def beta(a: float, b: float) -> TimeDistribution:
    if a <= 0 or b <= 0:
        raise DomainViolation("beta parameters must be positive")
    lognorm = special.betaln(a, b)

    def dens(t):
        with np.errstate(divide="ignore"):
            out = np.exp((a - 1) * np.log(t) + (b - 1) * np.log(1 - t) - lognorm)
        return out

    exc = tuple(p for p, cond in (((0.0), a > 1), ((1.0), b > 1)) if cond)
    return TimeDistribution(
        f"beta({a:g},{b:g})",
        density=dens,
        sample_block=lambda rng, n: rng.beta(a, b, size=n),
        exception_set=exc,
    )


def truncated_exp(rate: float) -> TimeDistribution:
    if rate <= 0:
        raise DomainViolation("rate must be positive")
    z = 1.0 - math.exp(-rate)

    def sample_block(rng, n):
        return -np.log1p(-z * rng.random(n)) / rate

    return TimeDistribution(
        f"truncated_exp({rate:g})",
        density=lambda t: rate * np.exp(-rate * t) / z,
        sample_block=sample_block,
    )


class DominanceReport(NamedTuple):
    passed: bool
    grid_n: int
    n_zero: int
    worst_points: tuple


def check_dominates(dist: TimeDistribution, grid_n: int = 1000) -> DominanceReport:
    """Grid scan for density positivity off the exception set.

    Necessary-condition heuristic only: a finite scan cannot certify that
    the law dominates Lebesgue measure, it can only catch violations.
    """
    if grid_n < 100:
        raise DomainViolation("grid_n must be >= 100")
    ts = np.linspace(ENDPOINT_SHIFT, 1.0 - ENDPOINT_SHIFT, grid_n)
    dens = dist.pdf(ts)
    exc = np.array(dist.exception_set, dtype=float) if dist.exception_set else np.empty(0)
    near_exc = np.zeros(grid_n, dtype=bool)
    tol = 2.0 / grid_n
    for p in exc:
        near_exc |= np.abs(ts - p) < tol
    bad = (dens <= 0) & ~near_exc
    worst = tuple(np.round(ts[bad][:5], 6))
    return DominanceReport(passed=not bool(bad.any()), grid_n=grid_n, n_zero=int(bad.sum()), worst_points=worst)


def reweight(
    dist: TimeDistribution,
    w: WeightFn,
    panels: int = SIMPSON_PANELS,
    safety: float = 1.1,
    overflow_guard: float = 1e12,
) -> tuple[TimeDistribution, float]:
    """Tilt `dist` by `w`: returns the tilted law and the mass K = E_dist[w].

    The tilted sampler is rejection against `dist` with a grid-estimated
    bound on w (times a safety factor), so any callable weight works.
    """
    ts, wts = simpson_grid(panels)
    wt_vals = w(ts)
    if np.any(wt_vals < 0):
        raise DomainViolation("weight must be nonnegative")
    k = float(wts @ (wt_vals * dist.pdf(ts)))
    if k <= 1e-14:
        raise ZeroMass(f"E[w] = {k!r} under {dist.name}")
    sup_w = float(wt_vals.max()) * safety
    if sup_w > overflow_guard:
        raise UnboundedWeight(f"grid sup of weight is {sup_w:.3e}")

    def tilted_density(t):
        return w(t) * dist.pdf(t) / k

    def tilted_block(rng: np.random.Generator, n: int) -> np.ndarray:
        out = np.empty(n)
        have = 0
        while have < n:
            cand = dist.draw(rng, max(n - have, 64) * 2)
            acc = rng.random(cand.size) * sup_w <= w(cand)
            take = cand[acc][: n - have]
            out[have : have + take.size] = take
            have += take.size
        return out

    exc = tuple(sorted(set(dist.exception_set) | set(w.exception_set)))
    tilted = TimeDistribution(
        f"tilted({dist.name},{w.name})",
        density=tilted_density,
        sample_block=tilted_block,
        exception_set=exc,
    )
    return tilted, k


class WeightedExpectation(NamedTuple):
    mc: float
    mc_stderr: float
    quad: float


def expect_weighted(
    dist: TimeDistribution,
    w: WeightFn,
    f: Callable[[np.ndarray], np.ndarray],
    n: int,
    seed: int,
    stream: int = 0,
    panels: int = SIMPSON_PANELS,
) -> WeightedExpectation:
    """E_dist[w(t) f(t)] by Monte Carlo and by Simpson quadrature."""
    ts = dist.sample_n(seed, stream, n)
    vals = w(ts) * np.asarray(f(ts), dtype=float)
    mc = float(vals.mean())
    se = float(vals.std(ddof=1) / math.sqrt(n)) if n > 1 else float("inf")
    quad = simpson_integral(lambda t: w(t) * np.asarray(f(t), float) * dist.pdf(t), panels)
    return WeightedExpectation(mc=mc, mc_stderr=se, quad=quad)
