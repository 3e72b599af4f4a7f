"""Forward simulation and distribution diagnostics.

ODE flows are integrated with fixed-step Euler; jump processes with exact
event times via thinning (rejection against a local rate bound, refreshed
per window, so diverging hazards near the terminal time stay correct).
Terminal laws are compared by total variation on finite spaces and by
moment deltas plus an energy-distance permutation test on continuous ones.
Everything is counter-based per trajectory chunk: identical seed and
configuration give bit-identical output regardless of worker count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import (
    DomainViolation,
    RateBoundExceeded,
    SupportMismatch,
    TrajectoryDiverged,
)
from .jumpkernels import FiniteSpace, JumpKernelSpec, normalized_jump_dist
from .streams import substream

TRAJ_CHUNK = 1024


@dataclass
class SimConfig:
    n_trajectories: int
    seed: int
    dt: Optional[float] = None  # ODE step
    t_max: Optional[float] = None  # CTMC truncation
    jobs: int = 1

    def __post_init__(self):
        if self.dt is not None and not (0.0 < self.dt <= 0.1):
            raise DomainViolation(f"dt must lie in (0, 0.1], got {self.dt!r}")
        if self.t_max is not None and not (0.9 < self.t_max < 1.0):
            raise DomainViolation(f"t_max must lie in (0.9, 1), got {self.t_max!r}")


@dataclass
class EmpiricalDist:
    """Samples (continuous case) or per-state counts (finite case)."""

    samples: Optional[np.ndarray] = None
    counts: Optional[np.ndarray] = None
    space: Optional[FiniteSpace] = None

    def n(self) -> int:
        if self.counts is not None:
            return int(self.counts.sum())
        return int(self.samples.shape[0])

    def probs(self) -> np.ndarray:
        if self.counts is None:
            raise SupportMismatch("probs() needs a finite-space result")
        return self.counts / self.counts.sum()


# ---------------------------------------------------------------------------
# Euler flow
# ---------------------------------------------------------------------------


def euler_flow(
    velocity: Callable[[float, np.ndarray], np.ndarray],
    config: SimConfig,
    dim: int = 1,
    x0_sampler: Optional[Callable[[np.random.Generator, int], np.ndarray]] = None,
) -> EmpiricalDist:
    """Integrate dx = u(t, x) dt from standard-normal starts to t = 1.

    `velocity` maps (t, states (n, d)) to velocities (n, d).  A ragged final
    step lands exactly on t = 1; its velocity is evaluated at the step start
    (always strictly before 1).
    """
    if config.dt is None:
        raise DomainViolation("euler_flow needs config.dt")
    dt = config.dt
    n_steps = int(math.floor(1.0 / dt + 1e-12))
    tail = 1.0 - n_steps * dt

    def run_chunk(chunk_idx: int, n: int) -> np.ndarray:
        rng = substream(config.seed, chunk_idx)
        x = x0_sampler(rng, n) if x0_sampler is not None else rng.standard_normal((n, dim))
        x = np.asarray(x, float).reshape(n, -1)
        for k in range(n_steps):
            t = k * dt
            x = x + dt * np.asarray(velocity(t, x), float)
            if not np.all(np.isfinite(x)):
                bad = int(np.argwhere(~np.isfinite(x).all(axis=1))[0][0])
                raise TrajectoryDiverged(f"trajectory {chunk_idx * TRAJ_CHUNK + bad} diverged at t={t + dt:.4f}")
        if tail > 1e-12:
            x = x + tail * np.asarray(velocity(n_steps * dt, x), float)
        return x

    outs = []
    remaining = config.n_trajectories
    idx = 0
    while remaining > 0:
        n = min(TRAJ_CHUNK, remaining)
        outs.append(run_chunk(idx, n))
        idx += 1
        remaining -= n
    return EmpiricalDist(samples=np.concatenate(outs, axis=0))


# ---------------------------------------------------------------------------
# CTMC simulation by thinning
# ---------------------------------------------------------------------------


@dataclass
class CtmcResult:
    dist: EmpiricalDist
    mean_jumps: float  # empirical check that expected jump counts stay finite
    max_jumps: int


def ctmc_simulate(
    kernel: JumpKernelSpec,
    multipliers: Callable[[float, int, object], np.ndarray],
    config: SimConfig,
    init_state: int = 0,
    latent_sampler: Optional[Callable[[np.random.Generator], object]] = None,
    max_retries: int = 100,
) -> CtmcResult:
    """Event-driven jump simulation up to t_max.

    Next-event times are drawn by thinning: within a window the total rate
    is bounded by a grid estimate times a safety factor; proposals from the
    bound are accepted with probability rate/bound.  A bound violation
    refreshes the bound and retries; persistent violations raise.
    """
    if config.t_max is None:
        raise DomainViolation("ctmc_simulate needs config.t_max")
    t_max = config.t_max
    n_states = kernel.space.n

    def total_rate_at(t: float, x: int, z) -> float:
        h = np.asarray(kernel.hazards(t, x), float)
        if h.size == 0:
            return 0.0
        r = np.asarray(multipliers(t, x, z), float)
        return float(h @ r)

    def window_bound(t0: float, t1: float, x: int, z) -> float:
        probes = (t0, 0.5 * (t0 + t1), t1)
        return 1.2 * max(total_rate_at(tp, x, z) for tp in probes)

    def run_one(rng: np.random.Generator) -> tuple[int, int]:
        z = latent_sampler(rng) if latent_sampler is not None else None
        t, x, jumps = 0.0, init_state, 0
        while t < t_max:
            window_end = min(t + 0.5 * (t_max - t) + 1e-6, t_max)
            bound = window_bound(t, window_end, x, z)
            if bound <= 0.0:
                t = window_end
                if window_end >= t_max:
                    break
                continue
            retries = 0
            cur = t
            while cur < window_end:
                cur = cur + rng.exponential(1.0 / bound)
                if cur >= window_end:
                    break
                lam = total_rate_at(cur, x, z)
                if lam > bound:
                    retries += 1
                    if retries > max_retries:
                        raise RateBoundExceeded(f"thinning bound violated {retries} times at t={cur:.6f}")
                    bound = 1.2 * lam
                    continue
                if lam > 0.0 and rng.random() * bound <= lam:
                    jump = normalized_jump_dist_with(kernel, multipliers, cur, x, z, rng)
                    x = jump
                    jumps += 1
                    break
            t = min(cur, window_end)
        return x, jumps

    counts = np.zeros(n_states, dtype=np.int64)
    total_jumps = 0
    max_jumps = 0
    remaining = config.n_trajectories
    chunk_idx = 0
    while remaining > 0:
        n = min(TRAJ_CHUNK, remaining)
        rng = substream(config.seed, chunk_idx)
        for _ in range(n):
            x, jumps = run_one(rng)
            counts[x] += 1
            total_jumps += jumps
            max_jumps = max(max_jumps, jumps)
        chunk_idx += 1
        remaining -= n
    return CtmcResult(
        dist=EmpiricalDist(counts=counts, space=kernel.space),
        mean_jumps=total_jumps / config.n_trajectories,
        max_jumps=max_jumps,
    )


def normalized_jump_dist_with(kernel, multipliers, t, x, z, rng) -> int:
    """Draw a jump target from hazards * multipliers at (t, x)."""
    h = np.asarray(kernel.hazards(t, x), float)
    r = np.asarray(multipliers(t, x, z), float)
    w = h * r
    tot = w.sum()
    w = w / tot
    j = rng.choice(w.size, p=w)
    return int(kernel.targets(t, x)[j])


# ---------------------------------------------------------------------------
# Forward-equation residuals
# ---------------------------------------------------------------------------


def kfe_residual(
    p_fn: Callable[[float], np.ndarray],
    rates_fn: Callable[[float], np.ndarray],
    t_grid: np.ndarray,
    dt: float = 1e-4,
    test_functions: Optional[np.ndarray] = None,
) -> tuple[float, np.ndarray]:
    """Max over (t, f) of |d/dt <p_t, f> - <p_t, L f>| by central differences.

    `rates_fn(t)` returns the off-diagonal rate matrix; the default test set
    is the spanning family of state indicators.
    """
    t_grid = np.asarray(t_grid, float)
    per_t = np.zeros(t_grid.size)
    for i, t in enumerate(t_grid):
        p = p_fn(float(t))
        q = np.asarray(rates_fn(float(t)), float)
        dp = (p_fn(float(t) + dt) - p_fn(float(t) - dt)) / (2.0 * dt)
        # <p, L f> for indicator f_s: inflow(s) - p(s) * outflow(s)
        gen = q.T @ p - q.sum(axis=1) * p
        if test_functions is None:
            per_t[i] = float(np.max(np.abs(dp - gen)))
        else:
            fs = np.asarray(test_functions, float)
            per_t[i] = float(np.max(np.abs(fs @ dp - fs @ gen)))
    return float(per_t.max()), per_t


# ---------------------------------------------------------------------------
# Distribution distances
# ---------------------------------------------------------------------------


@dataclass
class DistanceReport:
    kind: str
    tv: Optional[float] = None
    per_state: Optional[np.ndarray] = None
    mean_delta: Optional[np.ndarray] = None
    cov_delta: Optional[np.ndarray] = None
    energy: Optional[float] = None
    energy_z: Optional[float] = None


def dist_distance(a: EmpiricalDist, b, seed: int = 0, n_permutations: int = 100) -> DistanceReport:
    """Compare an empirical distribution to an exact or empirical reference."""
    if a.counts is not None:
        if isinstance(b, EmpiricalDist):
            if b.counts is None:
                raise SupportMismatch("finite empirical vs continuous reference")
            q = b.probs()
        else:
            q = np.asarray(b, float)
        p = a.probs()
        if p.shape != q.shape:
            raise SupportMismatch(f"state counts differ: {p.shape} vs {q.shape}")
        per_state = p - q
        return DistanceReport(kind="finite", tv=float(0.5 * np.abs(per_state).sum()), per_state=per_state)
    xs = np.asarray(a.samples, float)
    ys = b.samples if isinstance(b, EmpiricalDist) else np.asarray(b, float)
    ys = np.asarray(ys, float)
    if xs.ndim == 1:
        xs = xs[:, None]
    if ys.ndim == 1:
        ys = ys[:, None]
    if xs.shape[1] != ys.shape[1]:
        raise SupportMismatch(f"dimension mismatch: {xs.shape[1]} vs {ys.shape[1]}")
    mean_delta = xs.mean(axis=0) - ys.mean(axis=0)
    cov_delta = np.cov(xs.T).reshape(xs.shape[1], -1) - np.cov(ys.T).reshape(ys.shape[1], -1)
    stat = energy_distance(xs, ys)
    z = _energy_permutation_z(xs, ys, stat, seed, n_permutations)
    return DistanceReport(
        kind="continuous", mean_delta=mean_delta, cov_delta=cov_delta, energy=stat, energy_z=z
    )


def _cross_mean_abs(x_sorted: np.ndarray, y_sorted: np.ndarray) -> float:
    """Mean |x_i - y_j| for sorted 1-D arrays in O((n+m) log(n+m))."""
    n, m = x_sorted.size, y_sorted.size
    idx = np.searchsorted(y_sorted, x_sorted, side="right")
    csum = np.concatenate([[0.0], np.cumsum(y_sorted)])
    total_y = csum[-1]
    below = csum[idx]
    lhs = x_sorted * idx - below
    rhs = (total_y - below) - x_sorted * (m - idx)
    return float((lhs + rhs).sum() / (n * m))


def _self_mean_abs(x_sorted: np.ndarray) -> float:
    n = x_sorted.size
    if n < 2:
        return 0.0
    k = np.arange(n)
    s = float(np.sum((2 * k - n + 1) * x_sorted))
    return 2.0 * s / (n * n)


def energy_distance(xs: np.ndarray, ys: np.ndarray, cap: int = 4000) -> float:
    """Energy distance 2 E|X-Y| - E|X-X'| - E|Y-Y'|.

    1-D uses the exact sorted-prefix formula; higher dimensions subsample to
    `cap` points per side and use pairwise distances.
    """
    xs = np.atleast_2d(np.asarray(xs, float))
    ys = np.atleast_2d(np.asarray(ys, float))
    if xs.shape[1] == 1:
        x = np.sort(xs[:, 0])
        y = np.sort(ys[:, 0])
        return 2.0 * _cross_mean_abs(x, y) - _self_mean_abs(x) - _self_mean_abs(y)
    rng = np.random.default_rng(0)
    if xs.shape[0] > cap:
        xs = xs[rng.choice(xs.shape[0], cap, replace=False)]
    if ys.shape[0] > cap:
        ys = ys[rng.choice(ys.shape[0], cap, replace=False)]

    def pair_mean(u, v):
        d = np.sqrt(((u[:, None, :] - v[None, :, :]) ** 2).sum(-1))
        return float(d.mean())

    return 2.0 * pair_mean(xs, ys) - pair_mean(xs, xs) - pair_mean(ys, ys)


def _energy_permutation_z(xs, ys, stat: float, seed: int, n_permutations: int) -> float:
    pooled = np.concatenate([xs, ys], axis=0)
    n = xs.shape[0]
    null = np.empty(n_permutations)
    for i in range(n_permutations):
        rng = substream(seed, i)
        perm = rng.permutation(pooled.shape[0])
        null[i] = energy_distance(pooled[perm[:n]], pooled[perm[n:]])
    sd = float(null.std(ddof=1))
    if sd == 0.0:
        return float("inf") if stat > null.mean() else 0.0
    return float((stat - null.mean()) / sd)
