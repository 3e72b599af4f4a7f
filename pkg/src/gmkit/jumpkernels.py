"""Atomic jump kernels on finite state spaces.

A kernel is a finite list of jump components per (t, x): a strictly
positive hazard, a jump target state, and a nonnegative rate multiplier
that may depend on a latent z.  The total jump rate is the hazard-weighted
sum of multipliers and the jump distribution is its normalization.

Hazards are fixed schedule factors; multipliers are the learned part.  The
natural inner product on the multiplier space weights coordinates by the
hazards, which keeps losses hazard-free.

Two desk-scale conditional paths with fully analytic marginals, posteriors,
and rates are provided: the single-site masked-token path (state jumps from
a mask symbol to its latent token) and a two-state flip path whose
posterior genuinely varies in time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .bregman import AtomicDistribution
from .errors import (
    DimensionMismatch,
    DomainViolation,
    NonpositiveHazard,
    SchedulerInvalid,
    ZeroRate,
)


@dataclass(frozen=True)
class FiniteSpace:
    states: tuple

    def __post_init__(self):
        if len(self.states) < 2:
            raise DomainViolation("finite space needs at least 2 states")
        if len(set(self.states)) != len(self.states):
            raise DomainViolation("state labels must be distinct")

    @property
    def n(self) -> int:
        return len(self.states)

    def index(self, label) -> int:
        return self.states.index(label)


@dataclass
class JumpKernelSpec:
    """Component data: hazards h_j(t,x) > 0, targets, multipliers R_j(t,x,z) >= 0."""

    space: FiniteSpace
    targets: Callable[[float, int], tuple]  # (t, x_idx) -> target state indices
    hazards: Callable[[float, int], np.ndarray]
    cond_multipliers: Callable[[float, int, object], np.ndarray]

    def n_components(self, t: float, x: int) -> int:
        return len(self.targets(t, x))


def total_rate(kernel: JumpKernelSpec, t: float, x: int, z) -> float:
    """Sum of hazard * multiplier over the components at (t, x)."""
    h = np.asarray(kernel.hazards(t, x), dtype=float)
    if h.size == 0:
        return 0.0
    if np.any(h <= 0):
        raise NonpositiveHazard(f"hazard must be positive at (t={t}, x={x})")
    r = np.asarray(kernel.cond_multipliers(t, x, z), dtype=float)
    if r.shape != h.shape:
        raise DimensionMismatch("multipliers must match hazards")
    if np.any(r < 0):
        raise DomainViolation("rate multipliers must be nonnegative")
    return float(h @ r)


def normalized_jump_dist(kernel: JumpKernelSpec, t: float, x: int, z) -> AtomicDistribution:
    """Jump distribution: atom at each target with weight h R / total."""
    lam = total_rate(kernel, t, x, z)
    if lam <= 0.0:
        raise ZeroRate(f"total rate is zero at (t={t}, x={x})")
    h = np.asarray(kernel.hazards(t, x), dtype=float)
    r = np.asarray(kernel.cond_multipliers(t, x, z), dtype=float)
    w = h * r / lam
    pts = np.asarray(kernel.targets(t, x), dtype=float).reshape(-1, 1)
    keep = w > 0
    w = w[keep] / w[keep].sum()
    return AtomicDistribution(points=pts[keep], weights=w)


def marginal_multipliers(
    kernel: JumpKernelSpec,
    posterior: AtomicDistribution,
    t: float,
    x: int,
) -> np.ndarray:
    """Posterior expectation of the conditional multipliers."""
    n = kernel.n_components(t, x)
    out = np.zeros(n)
    for z, w in zip(posterior.points, posterior.weights):
        zz = z[0] if z.size == 1 else z
        out += w * np.asarray(kernel.cond_multipliers(t, x, zz), dtype=float)
    return out


def hazard_rescaled_rates(v_pred, h: float) -> np.ndarray:
    """Recover rates from a hazard-rescaled prediction: u = h * v."""
    if h <= 0:
        raise NonpositiveHazard(f"hazard {h!r} must be positive")
    return h * np.asarray(v_pred, dtype=float)


def rate_matrix(
    kernel: JumpKernelSpec,
    t: float,
    multipliers: Callable[[float, int], np.ndarray],
) -> np.ndarray:
    """Off-diagonal rate matrix rate[x, y] from per-state multipliers."""
    n = kernel.space.n
    q = np.zeros((n, n))
    for x in range(n):
        tg = kernel.targets(t, x)
        if not tg:
            continue
        h = np.asarray(kernel.hazards(t, x), dtype=float)
        r = np.asarray(multipliers(t, x), dtype=float)
        for j, y in enumerate(tg):
            q[x, int(y)] += h[j] * r[j]
    return q


# ---------------------------------------------------------------------------
# Interpolation schedulers for absorption-style paths
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KappaScheduler:
    """Monotone progress schedule with kappa(0)=0, kappa(1)=1."""

    kappa: Callable[[float], float]
    kappa_dot: Callable[[float], float]
    name: str = "kappa"

    def validate(self) -> None:
        if abs(self.kappa(0.0)) > 1e-12 or abs(self.kappa(1.0) - 1.0) > 1e-12:
            raise SchedulerInvalid("kappa must run from 0 to 1")
        for t in np.linspace(0.01, 0.99, 25):
            if self.kappa_dot(float(t)) <= 0:
                raise SchedulerInvalid(f"kappa_dot must be positive on (0,1); fails at t={t}")

    def hazard(self, t: float) -> float:
        """kappa_dot / (1 - kappa); diverges as t -> 1."""
        k = self.kappa(t)
        if k >= 1.0:
            raise SchedulerInvalid(f"hazard undefined at t={t!r} (kappa = 1)")
        return self.kappa_dot(t) / (1.0 - k)


def linear_kappa() -> KappaScheduler:
    s = KappaScheduler(kappa=lambda t: t, kappa_dot=lambda t: 1.0, name="linear")
    s.validate()
    return s


def cosine_kappa() -> KappaScheduler:
    h = math.pi / 2.0
    s = KappaScheduler(
        kappa=lambda t: 1.0 - math.cos(h * t),
        kappa_dot=lambda t: h * math.sin(h * t),
        name="cosine",
    )
    s.validate()
    return s


# ---------------------------------------------------------------------------
# Finite conditional paths with analytic marginals and posteriors
# ---------------------------------------------------------------------------


class FinitePath:
    """Interface shared by the finite desk-scale paths.

    Subclasses expose analytic `p_all`, `posterior_all`, conditional targets
    (the rate-multiplier vectors used as loss first-slot arguments), and a
    two-stage sampler.  `target_dim(x)` may be zero for absorbing states.
    """

    space: FiniteSpace
    n_latents: int
    latent_prior: np.ndarray
    kernel: JumpKernelSpec

    def p_all(self, ts: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def posterior_all(self, ts: np.ndarray, x: int) -> np.ndarray:
        raise NotImplementedError

    def cond_target(self, x: int, z: int) -> np.ndarray:
        raise NotImplementedError

    def target_dim(self, x: int) -> int:
        raise NotImplementedError

    def marginal_target_all(self, ts: np.ndarray, x: int) -> np.ndarray:
        post = self.posterior_all(np.asarray(ts, float), x)  # (m, nz)
        tg = np.stack([self.cond_target(x, z) for z in range(self.n_latents)])  # (nz, dim)
        return post @ tg

    def marginal_target(self, t: float, x: int) -> np.ndarray:
        return self.marginal_target_all(np.array([t]), x)[0]

    def posterior(self, t: float, x: int) -> np.ndarray:
        return self.posterior_all(np.array([t]), x)[0]

    def p_t(self, t: float) -> np.ndarray:
        return self.p_all(np.array([t]))[0]

    def sample(self, rng: np.random.Generator, n: int, ts: np.ndarray):
        raise NotImplementedError

    def cond_target_batch(self, t_arr: np.ndarray, x_arr: np.ndarray, z_arr: np.ndarray) -> np.ndarray:
        """Conditional targets row by row; callers pass same-dimension states."""
        return np.stack([self.cond_target(int(x), int(z)) for x, z in zip(x_arr, z_arr)])

    def exact_rate_matrix(self, t: float) -> np.ndarray:
        """Rates of the marginal generator (posterior-averaged multipliers)."""
        return rate_matrix(self.kernel, t, lambda tt, x: self.marginal_target(tt, x))

    def model_rate_matrix(self, t: float, predict: Callable[[float, int], np.ndarray]) -> np.ndarray:
        return rate_matrix(self.kernel, t, predict)


class MaskedTokenPath(FinitePath):
    """Single site: state 0 is the mask, states 1..V are vocabulary tokens.

    Conditioned on latent token z, the site stays masked with probability
    1 - kappa(t) and equals z otherwise.  Jumps leave the mask with hazard
    kappa_dot/(1-kappa) and conditional multiplier e_z; token states are
    absorbing.  The posterior at the mask equals the prior for every t.
    """

    def __init__(self, vocab_size: int, kappa: KappaScheduler, prior=None):
        if vocab_size < 1:
            raise DomainViolation("vocab_size must be >= 1")
        kappa.validate()
        self.vocab_size = int(vocab_size)
        self.kappa = kappa
        prior = np.full(vocab_size, 1.0 / vocab_size) if prior is None else np.asarray(prior, dtype=float)
        if prior.shape != (vocab_size,) or abs(prior.sum() - 1.0) > 1e-12 or np.any(prior < 0):
            raise DomainViolation("prior must be a probability vector over the vocabulary")
        self.latent_prior = prior
        self.n_latents = vocab_size
        self.space = FiniteSpace(("MASK",) + tuple(f"tok{j}" for j in range(vocab_size)))
        self.kernel = JumpKernelSpec(
            space=self.space,
            targets=self._targets,
            hazards=self._hazards,
            cond_multipliers=self._cond_multipliers,
        )

    def _targets(self, t: float, x: int) -> tuple:
        if x == 0:
            return tuple(range(1, self.vocab_size + 1))
        return ()

    def _hazards(self, t: float, x: int) -> np.ndarray:
        if x != 0:
            return np.empty(0)
        return np.full(self.vocab_size, self.kappa.hazard(t))

    def _cond_multipliers(self, t: float, x: int, z) -> np.ndarray:
        if x != 0:
            return np.empty(0)
        out = np.zeros(self.vocab_size)
        out[int(z)] = 1.0
        return out

    def target_dim(self, x: int) -> int:
        return self.vocab_size if x == 0 else 0

    def cond_target(self, x: int, z: int) -> np.ndarray:
        if x != 0:
            return np.empty(0)
        out = np.zeros(self.vocab_size)
        out[int(z)] = 1.0
        return out

    def p_all(self, ts: np.ndarray) -> np.ndarray:
        ts = np.asarray(ts, dtype=float)
        k = np.array([self.kappa.kappa(float(t)) for t in ts])
        out = np.empty((ts.size, self.space.n))
        out[:, 0] = 1.0 - k
        out[:, 1:] = k[:, None] * self.latent_prior[None, :]
        return out

    def posterior_all(self, ts: np.ndarray, x: int) -> np.ndarray:
        ts = np.asarray(ts, dtype=float)
        if x == 0:
            return np.tile(self.latent_prior, (ts.size, 1))
        out = np.zeros((ts.size, self.vocab_size))
        out[:, x - 1] = 1.0
        return out

    def sample(self, rng: np.random.Generator, n: int, ts: np.ndarray):
        ts = np.asarray(ts, dtype=float)
        z = rng.choice(self.vocab_size, size=n, p=self.latent_prior)
        k = np.array([self.kappa.kappa(float(t)) for t in ts])
        revealed = rng.random(n) < k
        x = np.where(revealed, z + 1, 0)
        active = x == 0
        return x, z, active

    def cond_target_batch(self, t_arr, x_arr, z_arr):
        return np.eye(self.vocab_size)[np.asarray(z_arr, int)]


def masked_path_kernel(vocab_size: int, kappa: KappaScheduler, prior=None) -> MaskedTokenPath:
    """Masked-token path bundle: kernel plus exact p_t and posterior."""
    return MaskedTokenPath(vocab_size, kappa, prior)


class TwoStateFlipPath(FinitePath):
    """Two states, latent z in {0,1}: p_t(x|z) = (1-kappa)/2 + kappa 1[x=z].

    Both states carry a single jump component toward the other state, so
    every sample contributes to the loss, and the posterior at a state
    moves with t — a useful contrast to the masked path's constant one.
    """

    def __init__(self, kappa: KappaScheduler, prior=None):
        kappa.validate()
        self.kappa = kappa
        prior = np.array([0.5, 0.5]) if prior is None else np.asarray(prior, dtype=float)
        if prior.shape != (2,) or abs(prior.sum() - 1.0) > 1e-12 or np.any(prior <= 0):
            raise DomainViolation("prior must be a positive probability pair")
        self.latent_prior = prior
        self.n_latents = 2
        self.space = FiniteSpace(("s0", "s1"))
        self.kernel = JumpKernelSpec(
            space=self.space,
            targets=lambda t, x: (1 - x,),
            hazards=lambda t, x: np.array([self.kappa.hazard(t)]),
            cond_multipliers=lambda t, x, z: np.array([1.0 if int(z) != x else 0.0]),
        )

    def target_dim(self, x: int) -> int:
        return 1

    def cond_target(self, x: int, z: int) -> np.ndarray:
        return np.array([1.0 if int(z) != x else 0.0])

    def _p_x_given_z(self, k: np.ndarray) -> np.ndarray:
        # returns (m, x, z)
        m = k.size
        out = np.empty((m, 2, 2))
        for x in range(2):
            for z in range(2):
                out[:, x, z] = (1.0 - k) / 2.0 + k * (1.0 if x == z else 0.0)
        return out

    def p_all(self, ts: np.ndarray) -> np.ndarray:
        ts = np.asarray(ts, dtype=float)
        k = np.array([self.kappa.kappa(float(t)) for t in ts])
        cond = self._p_x_given_z(k)
        return cond @ self.latent_prior

    def posterior_all(self, ts: np.ndarray, x: int) -> np.ndarray:
        ts = np.asarray(ts, dtype=float)
        k = np.array([self.kappa.kappa(float(t)) for t in ts])
        cond = self._p_x_given_z(k)[:, x, :] * self.latent_prior[None, :]
        return cond / cond.sum(axis=1, keepdims=True)

    def sample(self, rng: np.random.Generator, n: int, ts: np.ndarray):
        ts = np.asarray(ts, dtype=float)
        z = (rng.random(n) < self.latent_prior[1]).astype(int)
        k = np.array([self.kappa.kappa(float(t)) for t in ts])
        stay = rng.random(n) < (1.0 + k) / 2.0
        x = np.where(stay, z, 1 - z)
        active = np.ones(n, dtype=bool)
        return x, z, active

    def cond_target_batch(self, t_arr, x_arr, z_arr):
        return (np.asarray(z_arr, int) != np.asarray(x_arr, int)).astype(float)[:, None]


def hazard_norm_bound_residual(kernel: JumpKernelSpec, t: float, x: int, z) -> float:
    """max(0, ||R||_h - C * total_rate) with C = max over active j of h_j^{-1/2}."""
    h = np.asarray(kernel.hazards(t, x), dtype=float)
    r = np.asarray(kernel.cond_multipliers(t, x, z), dtype=float)
    if h.size == 0:
        return 0.0
    lam = float(h @ r)
    norm_h = math.sqrt(float(h @ (r * r)))
    active = r > 0
    if not np.any(active):
        return 0.0
    c = float(np.max(h[active] ** -0.5))
    return max(0.0, norm_h - c * lam)
