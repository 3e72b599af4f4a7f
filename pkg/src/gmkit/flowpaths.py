"""Continuous-state conditional paths: affine flows and diffusion scores.

The conditional path interpolates noise to a drawn endpoint,
``X_t = alpha(t) X_1 + sigma(t) xi`` with ``xi ~ N(0, I)``.  Its velocity is
affine in the endpoint, which is what lets an endpoint predictor
parameterize the drift: ``u(t, x) = A(t, x) x1_hat + b(t, x)``.

Desk-scale targets are Gaussian mixtures with diagonal covariances, chosen
because the posterior mean of the endpoint given the current state is in
closed form and doubles as the exact oracle for the trained predictor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import DimensionMismatch, DomainViolation, SingularTime, ZeroVariance
from .linparam import InnerSpace, LinearParam, TestFunction, euclidean
from .streams import substream

T_SINGULAR = 1.0 - 1e-9


@dataclass(frozen=True)
class AffineScheduler:
    """Interpolation coefficients alpha, sigma with derivatives."""

    alpha: Callable[[float], float]
    sigma: Callable[[float], float]
    alpha_dot: Callable[[float], float]
    sigma_dot: Callable[[float], float]
    name: str = "scheduler"

    def validate(self) -> None:
        checks = [
            (self.alpha(0.0), 0.0, "alpha(0)"),
            (self.alpha(1.0), 1.0, "alpha(1)"),
            (self.sigma(0.0), 1.0, "sigma(0)"),
            (self.sigma(1.0), 0.0, "sigma(1)"),
        ]
        for got, want, label in checks:
            if abs(got - want) > 1e-12:
                raise DomainViolation(f"{label} = {got!r}, expected {want}")


def linear_scheduler() -> AffineScheduler:
    """alpha = t, sigma = 1 - t; velocity reduces to (x1 - x)/(1 - t)."""
    s = AffineScheduler(
        alpha=lambda t: t,
        sigma=lambda t: 1.0 - t,
        alpha_dot=lambda t: 1.0,
        sigma_dot=lambda t: -1.0,
        name="linear",
    )
    s.validate()
    return s


def trig_scheduler() -> AffineScheduler:
    """alpha = sin(pi t / 2), sigma = cos(pi t / 2)."""
    h = math.pi / 2.0
    s = AffineScheduler(
        alpha=lambda t: math.sin(h * t),
        sigma=lambda t: math.cos(h * t),
        alpha_dot=lambda t: h * math.cos(h * t),
        sigma_dot=lambda t: -h * math.sin(h * t),
        name="trig",
    )
    s.validate()
    return s


def _check_time(t: float) -> None:
    if t >= T_SINGULAR:
        raise SingularTime(f"t = {t!r} too close to 1 for a sigma-divided quantity")


def sample_conditional(
    scheduler: AffineScheduler,
    x1,
    t: float,
    seed: int,
    stream: int = 0,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Draw X_t | X_1 = x1 at time t."""
    x1 = np.atleast_1d(np.asarray(x1, dtype=float))
    if rng is None:
        rng = substream(seed, stream)
    xi = rng.standard_normal(x1.shape)
    return scheduler.alpha(t) * x1 + scheduler.sigma(t) * xi


def cond_velocity(scheduler: AffineScheduler, t: float, x, x1) -> np.ndarray:
    """Velocity of the conditional path at (t, x) given endpoint x1."""
    _check_time(t)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x1 = np.atleast_1d(np.asarray(x1, dtype=float))
    a, s = scheduler.alpha(t), scheduler.sigma(t)
    ad, sd = scheduler.alpha_dot(t), scheduler.sigma_dot(t)
    return (ad - sd * a / s) * x1 + (sd / s) * x


@dataclass
class AffineVelocity:
    """u(t, x | x1) = A(t, x) x1 + b(t, x)."""

    A_at: Callable[[float, np.ndarray], np.ndarray]
    b_at: Callable[[float, np.ndarray], np.ndarray]


def scheduler_velocity(scheduler: AffineScheduler) -> AffineVelocity:
    """Endpoint-affine form induced by the interpolation coefficients."""

    def A_at(t, x):
        _check_time(t)
        x = np.atleast_1d(np.asarray(x, dtype=float))
        a, s = scheduler.alpha(t), scheduler.sigma(t)
        coef = scheduler.alpha_dot(t) - scheduler.sigma_dot(t) * a / s
        return coef * np.eye(x.size)

    def b_at(t, x):
        _check_time(t)
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return (scheduler.sigma_dot(t) / scheduler.sigma(t)) * x

    return AffineVelocity(A_at=A_at, b_at=b_at)


def velocity_from_x1pred(velocity: AffineVelocity, t: float, x, x1_hat) -> np.ndarray:
    """Model drift from a predicted endpoint."""
    _check_time(t)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x1_hat = np.atleast_1d(np.asarray(x1_hat, dtype=float))
    return velocity.A_at(t, x) @ x1_hat + velocity.b_at(t, x)


def velocity_linear_param(scheduler: AffineScheduler) -> list[LinearParam]:
    """Two-block split <A^T grad f, x1> + <b^T grad f, 1> of the drift generator."""
    vel = scheduler_velocity(scheduler)

    def need_grad(f: TestFunction, x):
        if f.grad is None:
            raise DomainViolation("velocity parameterization needs test functions with gradients")
        return np.atleast_1d(np.asarray(f.grad(x), dtype=float))

    def space_x1(t, x):
        return euclidean(np.atleast_1d(x).size)

    block_x1 = LinearParam(
        space_at=space_x1,
        K_apply=lambda t, x, f: vel.A_at(t, np.atleast_1d(x)).T @ need_grad(f, x),
    )
    block_const = LinearParam(
        space_at=lambda t, x: euclidean(1),
        K_apply=lambda t, x, f: np.array([float(vel.b_at(t, np.atleast_1d(x)) @ need_grad(f, x))]),
    )
    return [block_x1, block_const]


# ---------------------------------------------------------------------------
# Gaussian-mixture targets with closed-form endpoint posteriors
# ---------------------------------------------------------------------------


@dataclass
class GMMTarget:
    """Mixture of diagonal Gaussians in dim <= 2."""

    means: np.ndarray  # (k, d)
    variances: np.ndarray  # (k, d) diagonal entries
    weights: np.ndarray  # (k,)

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.variances = np.atleast_2d(np.asarray(self.variances, dtype=float))
        self.weights = np.asarray(self.weights, dtype=float)
        if self.means.shape != self.variances.shape:
            raise DimensionMismatch("means and variances must align")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise DomainViolation("mixture weights must sum to 1")
        if np.any(self.variances <= 0):
            raise DomainViolation("variances must be positive")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        comp = rng.choice(self.weights.size, size=n, p=self.weights)
        eps = rng.standard_normal((n, self.dim))
        return self.means[comp] + np.sqrt(self.variances[comp]) * eps

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def variance(self) -> np.ndarray:
        second = self.weights @ (self.variances + self.means**2)
        return second - self.mean() ** 2


def symmetric_two_gaussians(offset: float = 1.0, sd: float = 0.5) -> GMMTarget:
    return GMMTarget(
        means=np.array([[-offset], [offset]]),
        variances=np.array([[sd**2], [sd**2]]),
        weights=np.array([0.5, 0.5]),
    )


def gmm_posterior_x1_mean(target: GMMTarget, scheduler: AffineScheduler, t: float, x) -> np.ndarray:
    """E[X1 | X_t = x] under the affine path, componentwise in closed form.

    Stable at t close to 1: responsibilities are formed in log space and the
    per-component posterior mean is written so the sigma -> 0 limit is x.
    """
    if not (0.0 < t < 1.0):
        raise DomainViolation(f"posterior mean needs t in (0,1), got {t!r}")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    a, s = scheduler.alpha(t), scheduler.sigma(t)
    s2 = s * s
    # marginal of X_t under component k: N(a m_k, a^2 C_k + s^2)
    mvar = a * a * target.variances + s2  # (k, d)
    resid = x[None, :] - a * target.means
    logw = np.log(target.weights) - 0.5 * np.sum(resid**2 / mvar + np.log(mvar), axis=1)
    logw -= logw.max()
    resp = np.exp(logw)
    resp /= resp.sum()
    # per-component posterior mean of X1 given X_t = x
    comp_mean = (target.means * s2 + a * x[None, :] * target.variances) / mvar
    return resp @ comp_mean


def gmm_posterior_x1_mean_quadrature(
    target: GMMTarget,
    scheduler: AffineScheduler,
    t: float,
    x: float,
    nodes: int = 10_001,
    span: float = 8.0,
) -> float:
    """Trapezoid-rule oracle for the 1-D posterior mean (independent route)."""
    if target.dim != 1:
        raise DimensionMismatch("quadrature oracle is one-dimensional")
    x = float(np.atleast_1d(x)[0])
    a, s = scheduler.alpha(t), scheduler.sigma(t)
    sd_max = float(np.sqrt(target.variances.max()))
    lo = float(target.means.min()) - span * sd_max
    hi = float(target.means.max()) + span * sd_max
    grid = np.linspace(lo, hi, nodes)
    dens = np.zeros_like(grid)
    for m, v, w in zip(target.means[:, 0], target.variances[:, 0], target.weights):
        dens += w * np.exp(-((grid - m) ** 2) / (2 * v)) / np.sqrt(2 * np.pi * v)
    like = np.exp(-((x - a * grid) ** 2) / (2 * s * s))
    joint = dens * like
    z = np.trapezoid(joint, grid)
    return float(np.trapezoid(grid * joint, grid) / z)


# ---------------------------------------------------------------------------
# Diffusion (probability-flow) conditional scores
# ---------------------------------------------------------------------------


def accumulated_variance(sigma_fn: Callable[[float], float], t: float, panels: int = 2000) -> float:
    """v(t) = integral of sigma(s)^2 over [t, 1] by composite Simpson."""
    if panels % 2:
        panels += 1
    s = np.linspace(t, 1.0, panels + 1)
    vals = np.array([float(sigma_fn(si)) ** 2 for si in s])
    wts = np.ones(panels + 1)
    wts[1:-1:2] = 4.0
    wts[2:-1:2] = 2.0
    return float((1.0 - t) / (3.0 * panels) * (wts @ vals))


def diffusion_cond_score(sigma_fn: Callable[[float], float], t: float, x, x0) -> np.ndarray:
    """Conditional score (x0 - x) / v(t) of the reverse-run noising kernel.

    Time convention: the noising process runs from t = 1 (data) back to
    t = 0, so generation moves forward in t and the conditional law of the
    state at time t given the data point is N(x0, v(t) I) with
    v(t) = int_t^1 sigma^2.  The score is affine in x0 as required for
    endpoint prediction.
    """
    v = accumulated_variance(sigma_fn, t)
    if v <= 1e-12:
        raise ZeroVariance(f"accumulated variance at t={t!r} is {v!r}")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    return (x0 - x) / v


def sample_conditional_diffusion(
    sigma_fn: Callable[[float], float],
    x0,
    t: float,
    rng: np.random.Generator,
) -> np.ndarray:
    v = accumulated_variance(sigma_fn, t)
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    return x0 + math.sqrt(v) * rng.standard_normal(x0.shape)


# ---------------------------------------------------------------------------
# Conditional path for Monte Carlo training
# ---------------------------------------------------------------------------


@dataclass
class GaussianMixtureFlowPath:
    """Endpoint-prediction path: latent is the endpoint itself."""

    target: GMMTarget
    scheduler: AffineScheduler

    @property
    def dim(self) -> int:
        return self.target.dim

    def sample(self, rng: np.random.Generator, n: int, t: np.ndarray):
        """Draw (x_t, z) pairs at the given times; all samples active."""
        z = self.target.sample(rng, n)
        alpha = np.array([self.scheduler.alpha(ti) for ti in np.asarray(t, float)])
        sigma = np.array([self.scheduler.sigma(ti) for ti in np.asarray(t, float)])
        x = alpha[:, None] * z + sigma[:, None] * rng.standard_normal((n, self.dim))
        active = np.ones(n, dtype=bool)
        return x, z, active

    def cond_target_batch(self, t: np.ndarray, x: np.ndarray, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=float)

    def marginal_target(self, t: float, x) -> np.ndarray:
        return gmm_posterior_x1_mean(self.target, self.scheduler, t, x)
