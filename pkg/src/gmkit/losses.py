"""Conditional and marginal matching losses, parameter gradients, training.

Two estimator tiers:

* Monte Carlo — samples (t, Z, X_t) with counter-based streams, averages
  ``w(t) D(target_Z, prediction)``, and forms the pathwise gradient
  ``w(t) J^T grad_b D``.  Chunked with a fixed-order reduction so the value
  is independent of worker count.
* Exact enumeration — for finite-state paths with analytic marginals and
  posteriors, the loss is a Simpson quadrature over time of a finite sum
  over states (and latents, for the conditional loss).  This is the tier
  theorem checks run on: the conditional-vs-marginal gap must be constant
  in the parameters, and the two loss gradients must agree.

Also implemented here: joint-space rate tables over a product state space
with exact matrix-exponential marginals, the internally rescaled loss on
those tables, and its per-point minimization oracle.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import linalg, optimize

from . import bregman
from .bregman import DivergenceSpec
from .errors import (
    Diverged,
    DimensionMismatch,
    DomainViolation,
    NonpositiveScaling,
    RequiresFiniteSpace,
)
from .streams import CHUNK, chunk_sizes, substream
from .timeweight import TimeDistribution, WeightFn

# Stream stride between training steps; chunk indices never collide.
STEP_STRIDE = 1 << 20


# ---------------------------------------------------------------------------
# Parameterized predictors
# ---------------------------------------------------------------------------


def _apply_link(link: str, raw: np.ndarray) -> np.ndarray:
    if link == "identity":
        return raw
    if link == "exp":
        return np.exp(raw)
    if link == "sigmoid":
        return 1.0 / (1.0 + np.exp(-raw))
    raise DomainViolation(f"unknown link {link!r}")


def _link_deriv(link: str, pred: np.ndarray) -> np.ndarray:
    if link == "identity":
        return np.ones_like(pred)
    if link == "exp":
        return pred
    if link == "sigmoid":
        return pred * (1.0 - pred)
    raise DomainViolation(f"unknown link {link!r}")


class Model:
    """Prediction head: link(raw(t, x; theta)) with raw linear in theta."""

    link: str = "identity"
    theta: np.ndarray

    @property
    def n_params(self) -> int:
        return self.theta.size

    # subclasses implement these two
    def raw_batch(self, t_arr: np.ndarray, x_arr) -> np.ndarray:
        raise NotImplementedError

    def raw_grad_theta(self, t_arr: np.ndarray, x_arr, g: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def predict_batch(self, t_arr, x_arr) -> np.ndarray:
        return _apply_link(self.link, self.raw_batch(np.asarray(t_arr, float), x_arr))

    def grad_theta(self, t_arr, x_arr, g: np.ndarray) -> np.ndarray:
        """Sum over rows of g[n]^T d predict[n] / d theta."""
        t_arr = np.asarray(t_arr, float)
        pred = self.predict_batch(t_arr, x_arr)
        return self.raw_grad_theta(t_arr, x_arr, np.asarray(g, float) * _link_deriv(self.link, pred))

    def predict(self, t: float, x) -> np.ndarray:
        return self.predict_batch(np.array([t]), self._wrap_x(x))[0]

    def jacobian(self, t: float, x) -> np.ndarray:
        """d predict / d theta at one point, assembled row by row."""
        out_dim = self.predict(t, x).size
        rows = []
        for i in range(out_dim):
            g = np.zeros((1, out_dim))
            g[0, i] = 1.0
            rows.append(self.grad_theta(np.array([t]), self._wrap_x(x), g))
        return np.stack(rows)

    def _wrap_x(self, x):
        if np.isscalar(x) or (isinstance(x, (int, np.integer))):
            return np.array([x])
        return np.asarray(x)[None, ...]

    def with_theta(self, theta: np.ndarray) -> "Model":
        clone = replace(self) if hasattr(self, "__dataclass_fields__") else None
        if clone is None:
            raise NotImplementedError
        clone.theta = np.asarray(theta, float).copy()
        return clone


@dataclass
class LinearModel(Model):
    """Spec form: predict(t,x) = link(features(t,x) @ theta).

    `features` returns the (out_dim, n_params) design matrix at one point;
    `features_batch`, when given, vectorizes it to (n, out_dim, n_params).
    """

    theta: np.ndarray
    features: Callable[[float, object], np.ndarray]
    link: str = "identity"
    features_batch: Optional[Callable] = None

    def _design(self, t_arr, x_arr) -> np.ndarray:
        if self.features_batch is not None:
            return np.asarray(self.features_batch(t_arr, x_arr), float)
        return np.stack([np.atleast_2d(self.features(float(t), x)) for t, x in zip(t_arr, x_arr)])

    def raw_batch(self, t_arr, x_arr):
        return self._design(t_arr, x_arr) @ self.theta

    def raw_grad_theta(self, t_arr, x_arr, g):
        return np.einsum("no,nop->p", g, self._design(t_arr, x_arr))


@dataclass
class TimePolyModel(Model):
    """Per-state polynomial in t for each output component."""

    n_states: int
    out_dim: int
    degree: int
    theta: np.ndarray = None  # flattened (n_states, out_dim, degree+1)
    link: str = "identity"

    def __post_init__(self):
        if self.theta is None:
            self.theta = np.zeros(self.n_states * self.out_dim * (self.degree + 1))
        self.theta = np.asarray(self.theta, float).reshape(-1).copy()
        if self.theta.size != self.n_states * self.out_dim * (self.degree + 1):
            raise DimensionMismatch(f"theta size {self.theta.size} does not fit the model grid")

    def _basis(self, t_arr) -> np.ndarray:
        return np.vander(np.asarray(t_arr, float), self.degree + 1, increasing=True)

    def raw_batch(self, t_arr, x_arr):
        th = self.theta.reshape(self.n_states, self.out_dim, self.degree + 1)
        return np.einsum("nok,nk->no", th[np.asarray(x_arr, int)], self._basis(t_arr))

    def raw_grad_theta(self, t_arr, x_arr, g):
        acc = np.zeros((self.n_states, self.out_dim, self.degree + 1))
        contrib = g[:, :, None] * self._basis(t_arr)[:, None, :]
        np.add.at(acc, np.asarray(x_arr, int), contrib)
        return acc.reshape(-1)


@dataclass
class TimeBinModel(Model):
    """Per-(time bin, state) constant multipliers through a link."""

    t_edges: np.ndarray
    n_states: int
    out_dim: int
    theta: np.ndarray = None
    link: str = "sigmoid"

    def __post_init__(self):
        self.t_edges = np.asarray(self.t_edges, float)
        nt = self.t_edges.size - 1
        if self.theta is None:
            self.theta = np.zeros(nt * self.n_states * self.out_dim)
        self.theta = np.asarray(self.theta, float).reshape(-1).copy()
        if self.theta.size != nt * self.n_states * self.out_dim:
            raise DimensionMismatch(f"theta size {self.theta.size} does not fit the model grid")

    @property
    def n_tbins(self) -> int:
        return self.t_edges.size - 1

    def _tbin(self, t_arr) -> np.ndarray:
        return np.clip(np.searchsorted(self.t_edges, t_arr, side="right") - 1, 0, self.n_tbins - 1)

    def raw_batch(self, t_arr, x_arr):
        th = self.theta.reshape(self.n_tbins, self.n_states, self.out_dim)
        return th[self._tbin(t_arr), np.asarray(x_arr, int)]

    def raw_grad_theta(self, t_arr, x_arr, g):
        acc = np.zeros((self.n_tbins, self.n_states, self.out_dim))
        np.add.at(acc, (self._tbin(t_arr), np.asarray(x_arr, int)), g)
        return acc.reshape(-1)


@dataclass
class BinnedLinearModel(Model):
    """Piecewise-linear-in-x endpoint predictor on a (t, x) grid, 1-D state."""

    t_edges: np.ndarray
    x_edges: np.ndarray
    theta: np.ndarray = None
    link: str = "identity"

    def __post_init__(self):
        self.t_edges = np.asarray(self.t_edges, float)
        self.x_edges = np.asarray(self.x_edges, float)
        nt, nx = self.t_edges.size - 1, self.x_edges.size - 1
        if self.theta is None:
            self.theta = np.zeros(nt * nx * 2)
        self.theta = np.asarray(self.theta, float).reshape(-1).copy()
        if self.theta.size != nt * nx * 2:
            raise DimensionMismatch(f"theta size {self.theta.size} does not fit the model grid")
        self._centers = 0.5 * (self.x_edges[:-1] + self.x_edges[1:])

    def _bins(self, t_arr, x_arr):
        xv = np.asarray(x_arr, float).reshape(len(t_arr), -1)[:, 0]
        tb = np.clip(np.searchsorted(self.t_edges, t_arr, side="right") - 1, 0, self.t_edges.size - 2)
        xb = np.clip(np.searchsorted(self.x_edges, xv, side="right") - 1, 0, self.x_edges.size - 2)
        return tb, xb, xv - self._centers[xb]

    def raw_batch(self, t_arr, x_arr):
        nt, nx = self.t_edges.size - 1, self.x_edges.size - 1
        th = self.theta.reshape(nt, nx, 2)
        tb, xb, dx = self._bins(t_arr, x_arr)
        return (th[tb, xb, 0] + th[tb, xb, 1] * dx)[:, None]

    def raw_grad_theta(self, t_arr, x_arr, g):
        nt, nx = self.t_edges.size - 1, self.x_edges.size - 1
        acc = np.zeros((nt, nx, 2))
        tb, xb, dx = self._bins(t_arr, x_arr)
        gv = np.asarray(g, float)[:, 0]
        np.add.at(acc, (tb, xb, 0), gv)
        np.add.at(acc, (tb, xb, 1), gv * dx)
        return acc.reshape(-1)


@dataclass
class MLPModel(Model):
    """One hidden tanh layer with an explicit backward pass."""

    in_dim: int
    hidden: int
    out_dim: int
    theta: np.ndarray = None
    link: str = "identity"
    inputs: Optional[Callable] = None  # (t_arr, x_arr) -> (n, in_dim); default [t, x...]

    def __post_init__(self):
        if self.theta is None:
            rng = np.random.default_rng(0)
            w1 = rng.normal(scale=1.0 / math.sqrt(self.in_dim), size=(self.hidden, self.in_dim))
            w2 = rng.normal(scale=1.0 / math.sqrt(self.hidden), size=(self.out_dim, self.hidden))
            self.theta = np.concatenate([w1.ravel(), np.zeros(self.hidden), w2.ravel(), np.zeros(self.out_dim)])
        self.theta = np.asarray(self.theta, float).reshape(-1).copy()

    def _unpack(self):
        h, i, o = self.hidden, self.in_dim, self.out_dim
        w1 = self.theta[: h * i].reshape(h, i)
        b1 = self.theta[h * i : h * i + h]
        w2 = self.theta[h * i + h : h * i + h + o * h].reshape(o, h)
        b2 = self.theta[h * i + h + o * h :]
        return w1, b1, w2, b2

    def _inputs(self, t_arr, x_arr) -> np.ndarray:
        if self.inputs is not None:
            return np.asarray(self.inputs(t_arr, x_arr), float)
        xv = np.asarray(x_arr, float).reshape(len(t_arr), -1)
        return np.concatenate([np.asarray(t_arr, float)[:, None], xv], axis=1)

    def raw_batch(self, t_arr, x_arr):
        w1, b1, w2, b2 = self._unpack()
        hid = np.tanh(self._inputs(t_arr, x_arr) @ w1.T + b1)
        return hid @ w2.T + b2

    def raw_grad_theta(self, t_arr, x_arr, g):
        w1, b1, w2, b2 = self._unpack()
        inp = self._inputs(t_arr, x_arr)
        pre = inp @ w1.T + b1
        hid = np.tanh(pre)
        g = np.asarray(g, float)
        d_w2 = g.T @ hid
        d_b2 = g.sum(axis=0)
        d_hid = g @ w2
        d_pre = d_hid * (1.0 - hid**2)
        d_w1 = d_pre.T @ inp
        d_b1 = d_pre.sum(axis=0)
        return np.concatenate([d_w1.ravel(), d_b1, d_w2.ravel(), d_b2])


# ---------------------------------------------------------------------------
# Loss specification and Monte Carlo tier
# ---------------------------------------------------------------------------


@dataclass
class LossSpec:
    """Everything the estimators need: path, divergence, time law, weight."""

    path: object
    divergence: DivergenceSpec
    time_dist: TimeDistribution
    weight: WeightFn
    n_samples: int
    seed: int


def _fan_out(fn, n: int, jobs: int):
    if jobs <= 1 or n <= 1:
        return [fn(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, range(n)))


def _mc_chunk(spec: LossSpec, model: Model, stream: int, n: int, want_grad: bool):
    rng = substream(spec.seed, stream)
    t = spec.time_dist.draw(rng, n)
    x, z, active = spec.path.sample(rng, n, t)
    w = np.asarray(spec.weight(t), float)
    vals = np.zeros(n)
    grad = np.zeros(model.n_params) if want_grad else None
    if np.any(active):
        ta = t[active]
        xa = x[active]
        za = z[active]
        tgt = spec.path.cond_target_batch(ta, xa, za)
        pred = model.predict_batch(ta, xa)
        vals[active] = w[active] * bregman.eval_batch(spec.divergence, tgt, pred, t=ta)
        if want_grad:
            gb = bregman.grad_b_batch(spec.divergence, tgt, pred, t=ta)
            grad = model.grad_theta(ta, xa, w[active][:, None] * gb)
    return float(vals.sum()), float((vals**2).sum()), n, grad


def _mc_reduce(spec: LossSpec, model: Model, jobs: int, stream_base: int, want_grad: bool):
    sizes = chunk_sizes(spec.n_samples)
    if not sizes:
        raise DomainViolation("n_samples must be positive")

    def work(i):
        return _mc_chunk(spec, model, stream_base + i, sizes[i], want_grad)

    parts = _fan_out(work, len(sizes), jobs)
    total = sum(p[0] for p in parts)
    total_sq = sum(p[1] for p in parts)
    n = sum(p[2] for p in parts)
    mean = total / n
    var = max(total_sq - n * mean * mean, 0.0) / (n - 1) if n > 1 else float("inf")
    stderr = math.sqrt(var / n)
    grad = None
    if want_grad:
        grad = np.zeros(model.n_params)
        for p in parts:
            grad += p[3]
        grad /= n
    return mean, stderr, grad


def cgm_loss(spec: LossSpec, model: Model, jobs: int = 1, stream_base: int = 0) -> tuple[float, float]:
    """Monte Carlo conditional loss: (value, standard error)."""
    mean, stderr, _ = _mc_reduce(spec, model, jobs, stream_base, want_grad=False)
    return mean, stderr


def grad_loss(spec: LossSpec, model: Model, jobs: int = 1, stream_base: int = 0) -> np.ndarray:
    """Pathwise Monte Carlo gradient on the same sample stream as cgm_loss."""
    _, _, grad = _mc_reduce(spec, model, jobs, stream_base, want_grad=True)
    return grad


def loss_and_grad(spec: LossSpec, model: Model, jobs: int = 1, stream_base: int = 0):
    return _mc_reduce(spec, model, jobs, stream_base, want_grad=True)


# ---------------------------------------------------------------------------
# Exact tier (finite paths)
# ---------------------------------------------------------------------------


def simpson_nodes(n_nodes: int = 401) -> tuple[np.ndarray, np.ndarray]:
    """Simpson nodes/weights on [0,1] with raw endpoints."""
    if n_nodes < 3 or n_nodes % 2 == 0:
        raise DomainViolation("n_nodes must be odd and >= 3")
    panels = n_nodes - 1
    ts = np.linspace(0.0, 1.0, n_nodes)
    wts = np.ones(n_nodes)
    wts[1:-1:2] = 4.0
    wts[2:-1:2] = 2.0
    wts /= 3.0 * panels
    return ts, wts


def _require_finite(path) -> None:
    if not hasattr(path, "p_all") or not hasattr(path, "posterior_all"):
        raise RequiresFiniteSpace("exact enumeration needs a finite path with analytic marginals")


def _exact_sweep(spec: LossSpec, model: Optional[Model], t_nodes: int, mode: str):
    """Shared quadrature loop.

    mode: 'gm' | 'cgm' | 'constant' for values, 'gm_grad' | 'cgm_grad' for
    parameter gradients.
    """
    _require_finite(spec.path)
    path = spec.path
    ts, wts = simpson_nodes(t_nodes)
    dens = spec.time_dist.pdf(ts)
    wgt = np.asarray(spec.weight(ts), float)
    p_states = path.p_all(ts)  # (m, n_states)
    total = 0.0
    grad = np.zeros(model.n_params) if model is not None and mode.endswith("grad") else None
    for x in range(path.space.n):
        dim = path.target_dim(x)
        if dim == 0:
            continue
        mask = p_states[:, x] > 0
        if not np.any(mask):
            continue
        tm = ts[mask]
        scale = wts[mask] * dens[mask] * wgt[mask] * p_states[mask, x]
        x_rep = np.full(tm.size, x, dtype=int)
        pred = model.predict_batch(tm, x_rep) if model is not None else None
        marg = path.marginal_target_all(tm, x)
        if mode == "gm":
            total += float(scale @ bregman.eval_batch(spec.divergence, marg, pred, t=tm))
        elif mode == "gm_grad":
            gb = bregman.grad_b_batch(spec.divergence, marg, pred, t=tm)
            grad += model.grad_theta(tm, x_rep, scale[:, None] * gb)
        else:
            post = path.posterior_all(tm, x)  # (m, nz)
            for z in range(path.n_latents):
                pz = post[:, z]
                sub = pz > 0
                if not np.any(sub):
                    continue
                tgt = np.tile(path.cond_target(x, z), (int(sub.sum()), 1))
                sc = scale[sub] * pz[sub]
                if mode == "cgm":
                    total += float(sc @ bregman.eval_batch(spec.divergence, tgt, pred[sub], t=tm[sub]))
                elif mode == "constant":
                    # rows where the posterior is degenerate have target == mean
                    # and contribute exactly zero; evaluating them would put the
                    # second slot on the domain boundary
                    diff = np.any(tgt != marg[sub], axis=1)
                    if np.any(diff):
                        total += float(
                            sc[diff]
                            @ bregman.eval_batch(spec.divergence, tgt[diff], marg[sub][diff], t=tm[sub][diff])
                        )
                elif mode == "cgm_grad":
                    gb = bregman.grad_b_batch(spec.divergence, tgt, pred[sub], t=tm[sub])
                    grad += model.grad_theta(tm[sub], x_rep[sub], sc[:, None] * gb)
    return total if grad is None else grad


def gm_loss_exact(spec: LossSpec, model: Model, t_nodes: int = 401) -> float:
    """Exact marginal loss on a finite path (Simpson over time, sum over states)."""
    return _exact_sweep(spec, model, t_nodes, "gm")


def cgm_loss_exact(spec: LossSpec, model: Model, t_nodes: int = 401) -> float:
    """Exact conditional loss (additionally sums over posterior atoms)."""
    return _exact_sweep(spec, model, t_nodes, "cgm")


def gap_constant_exact(spec: LossSpec, t_nodes: int = 401) -> float:
    """The model-free spread term E[w(t) D(conditional target, marginal target)]."""
    return _exact_sweep(spec, None, t_nodes, "constant")


def grad_gm_exact(spec: LossSpec, model: Model, t_nodes: int = 401) -> np.ndarray:
    return _exact_sweep(spec, model, t_nodes, "gm_grad")


def grad_cgm_exact(spec: LossSpec, model: Model, t_nodes: int = 401) -> np.ndarray:
    return _exact_sweep(spec, model, t_nodes, "cgm_grad")


@dataclass
class GapReport:
    gaps: np.ndarray
    gap_spread: float
    grad_rel_err: float
    direct_constant: float
    cross_check_err: float
    passed: bool


def prop2_gap_test(
    spec: LossSpec,
    models: Sequence[Model],
    t_nodes: int = 401,
    gap_tol: float = 1e-9,
    grad_rtol: float = 1e-8,
) -> GapReport:
    """Exact conditional-minus-marginal gap over many parameter vectors.

    The gap must be constant in the parameters, the two loss gradients must
    agree, and the gap must equal the directly computed spread term.
    """
    gaps = []
    grad_err = 0.0
    for m in models:
        gaps.append(cgm_loss_exact(spec, m, t_nodes) - gm_loss_exact(spec, m, t_nodes))
        gc = grad_cgm_exact(spec, m, t_nodes)
        gg = grad_gm_exact(spec, m, t_nodes)
        denom = max(float(np.linalg.norm(gg)), 1e-30)
        grad_err = max(grad_err, float(np.linalg.norm(gc - gg)) / denom)
    gaps = np.asarray(gaps)
    spread = float(np.max(np.abs(gaps - gaps[0])))
    direct = gap_constant_exact(spec, t_nodes)
    cross = float(np.max(np.abs(gaps - direct)))
    return GapReport(
        gaps=gaps,
        gap_spread=spread,
        grad_rel_err=grad_err,
        direct_constant=direct,
        cross_check_err=cross,
        passed=(spread < gap_tol and cross < gap_tol and grad_err < grad_rtol),
    )


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: Model
    steps: np.ndarray
    losses: np.ndarray
    stderrs: np.ndarray
    final_step: int


def train(
    spec: LossSpec,
    model: Model,
    steps: int,
    lr: float,
    decay: float = 1.0,
    exact: bool = False,
    t_nodes: int = 401,
    start_step: int = 0,
    diverge_threshold: float = 1e6,
    jobs: int = 1,
    trace_every: int = 1,
) -> TrainResult:
    """Plain gradient descent with a fixed or geometrically decaying step."""
    cur = model.with_theta(model.theta)
    rows_k, rows_l, rows_s = [], [], []
    for i in range(steps):
        k = start_step + i
        if exact:
            loss = cgm_loss_exact(spec, cur, t_nodes)
            se = 0.0
            grad = grad_cgm_exact(spec, cur, t_nodes)
        else:
            loss, se, grad = loss_and_grad(spec, cur, jobs=jobs, stream_base=(k + 1) * STEP_STRIDE)
        if not math.isfinite(loss) or loss > diverge_threshold:
            raise Diverged(f"loss {loss!r} at step {k}")
        if k % trace_every == 0 or i == steps - 1:
            rows_k.append(k)
            rows_l.append(loss)
            rows_s.append(se)
        cur.theta -= lr * (decay**k) * grad
    return TrainResult(
        model=cur,
        steps=np.asarray(rows_k, dtype=int),
        losses=np.asarray(rows_l),
        stderrs=np.asarray(rows_s),
        final_step=start_step + steps,
    )


# ---------------------------------------------------------------------------
# Joint-space rate tables and internally rescaled losses
# ---------------------------------------------------------------------------


@dataclass
class EFRateTable:
    """CTMC on a product space X x Z with exact expm marginals.

    `q` is the joint generator over flattened pairs (x, z) -> x * nz + z:
    nonnegative off-diagonal, rows summing to zero.  The path is
    p_t = p_0 expm(t q), so the joint forward equation holds exactly and
    the x-marginal inherits it with posterior-averaged rates.
    """

    nx: int
    nz: int
    q: np.ndarray
    p0: np.ndarray

    def __post_init__(self):
        n = self.nx * self.nz
        self.q = np.asarray(self.q, float)
        self.p0 = np.asarray(self.p0, float)
        if self.q.shape != (n, n) or self.p0.shape != (n,):
            raise DimensionMismatch("generator/initial size mismatch")
        off = self.q - np.diag(np.diag(self.q))
        if np.any(off < 0):
            raise DomainViolation("off-diagonal rates must be nonnegative")
        if np.max(np.abs(self.q.sum(axis=1))) > 1e-12:
            raise DomainViolation("generator rows must sum to zero")
        if abs(self.p0.sum() - 1.0) > 1e-12 or np.any(self.p0 < 0):
            raise DomainViolation("p0 must be a probability vector")

    @staticmethod
    def random(rng: np.random.Generator, nx: int, nz: int, scale: float = 1.0, p0=None) -> "EFRateTable":
        n = nx * nz
        q = scale * rng.uniform(0.2, 1.0, size=(n, n))
        np.fill_diagonal(q, 0.0)
        np.fill_diagonal(q, -q.sum(axis=1))
        if p0 is None:
            p0 = rng.uniform(0.2, 1.0, size=n)
            p0 /= p0.sum()
        return EFRateTable(nx=nx, nz=nz, q=q, p0=np.asarray(p0, float))

    def pair(self, x: int, z: int) -> int:
        return x * self.nz + z

    def destinations(self, x: int) -> list[int]:
        return [xp for xp in range(self.nx) if xp != x]

    def p_joint_all(self, ts: np.ndarray) -> np.ndarray:
        ts = np.asarray(ts, float)
        out = np.empty((ts.size, self.nx, self.nz))
        for i, t in enumerate(ts):
            out[i] = (self.p0 @ linalg.expm(float(t) * self.q)).reshape(self.nx, self.nz)
        return out

    def x_marginal_all(self, ts: np.ndarray) -> np.ndarray:
        return self.p_joint_all(ts).sum(axis=2)

    def posterior_all(self, ts: np.ndarray, x: int) -> np.ndarray:
        pj = self.p_joint_all(ts)[:, x, :]
        tot = pj.sum(axis=1, keepdims=True)
        if np.any(tot <= 0):
            raise DomainViolation(f"state {x} has zero marginal mass at some node")
        return pj / tot

    def cond_x_target(self, x: int, z: int) -> np.ndarray:
        """Summed joint rates out of (x, z) toward each other x'."""
        row = self.q[self.pair(x, z)]
        return np.array([sum(row[self.pair(xp, zp)] for zp in range(self.nz)) for xp in self.destinations(x)])

    def marginal_x_target_all(self, ts: np.ndarray, x: int) -> np.ndarray:
        post = self.posterior_all(ts, x)  # (m, nz)
        cond = np.stack([self.cond_x_target(x, z) for z in range(self.nz)])  # (nz, nx-1)
        return post @ cond

    def marginal_kfe_residual(self, ts: np.ndarray) -> float:
        """Max |d/dt p(x) - (inflow - outflow)| with posterior-averaged rates.

        d/dt p(x) comes from the exact joint identity dp = p q, so the check
        does not share code with the marginalization being verified.
        """
        ts = np.asarray(ts, float)
        worst = 0.0
        for i, t in enumerate(ts):
            pj = (self.p0 @ linalg.expm(float(t) * self.q))
            dpj = pj @ self.q
            dp_x = dpj.reshape(self.nx, self.nz).sum(axis=1)
            p_x = pj.reshape(self.nx, self.nz).sum(axis=1)
            rates = np.zeros((self.nx, self.nx))
            for x in range(self.nx):
                marg = self.marginal_x_target_all(np.array([t]), x)[0]
                for j, xp in enumerate(self.destinations(x)):
                    rates[x, xp] = marg[j]
            flow = rates.T @ p_x - rates.sum(axis=1) * p_x
            worst = max(worst, float(np.max(np.abs(dp_x - flow))))
        return worst


def _scaling_values(fn, ts: np.ndarray, name: str) -> np.ndarray:
    vals = np.asarray(fn(ts), float) * np.ones_like(ts)
    if np.any(vals <= 0):
        raise NonpositiveScaling(f"{name}(t) must be strictly positive")
    return vals


def ef_loss(
    table: EFRateTable,
    model: Model,
    divergence: DivergenceSpec,
    a: Callable,
    b: Callable,
    w: Callable,
    time_dist: Optional[TimeDistribution] = None,
    fixed_t: Optional[float] = None,
    t_nodes: int = 401,
    against: str = "conditional",
) -> float:
    """Exact internally rescaled loss on the joint table.

    `against='conditional'` compares ``a(t) * (rates summed over destination
    z)`` to ``b(t) * prediction`` under the joint law; `'marginal'` uses the
    posterior-averaged x-rates under the x-marginal law.  `fixed_t` selects
    the degenerate single-time mode instead of a time quadrature.
    """
    if fixed_t is not None:
        ts = np.array([float(fixed_t)])
        mass = np.ones(1)
    else:
        if time_dist is None:
            raise DomainViolation("need a time distribution or fixed_t")
        ts, wq = simpson_nodes(t_nodes)
        mass = wq * time_dist.pdf(ts)
    av = _scaling_values(a, ts, "a")
    bv = _scaling_values(b, ts, "b")
    wv = np.asarray(w(ts), float) * np.ones_like(ts)
    pj = table.p_joint_all(ts)
    total = 0.0
    for x in range(table.nx):
        x_rep = np.full(ts.size, x, dtype=int)
        pred = model.predict_batch(ts, x_rep)
        slot2 = bv[:, None] * pred
        if against == "marginal":
            tgt = av[:, None] * table.marginal_x_target_all(ts, x)
            weight = mass * wv * pj[:, x, :].sum(axis=1)
            keep = weight > 0
            if np.any(keep):
                total += float(weight[keep] @ bregman.eval_batch(divergence, tgt[keep], slot2[keep], t=ts[keep]))
        else:
            for z in range(table.nz):
                tgt = av[:, None] * table.cond_x_target(x, z)[None, :]
                weight = mass * wv * pj[:, x, z]
                keep = weight > 0
                if np.any(keep):
                    total += float(
                        weight[keep] @ bregman.eval_batch(divergence, tgt[keep], slot2[keep], t=ts[keep])
                    )
    return total


def ef_constant_term(
    table: EFRateTable,
    divergence: DivergenceSpec,
    a: Callable,
    w: Callable,
    time_dist: Optional[TimeDistribution] = None,
    fixed_t: Optional[float] = None,
    t_nodes: int = 401,
) -> float:
    """Model-free spread term E[w D(a * conditional rates, a * marginal rates)]."""
    if fixed_t is not None:
        ts = np.array([float(fixed_t)])
        mass = np.ones(1)
    else:
        ts, wq = simpson_nodes(t_nodes)
        mass = wq * time_dist.pdf(ts)
    av = _scaling_values(a, ts, "a")
    wv = np.asarray(w(ts), float) * np.ones_like(ts)
    pj = table.p_joint_all(ts)
    total = 0.0
    for x in range(table.nx):
        marg = av[:, None] * table.marginal_x_target_all(ts, x)
        for z in range(table.nz):
            tgt = av[:, None] * table.cond_x_target(x, z)[None, :]
            weight = mass * wv * pj[:, x, z]
            keep = weight > 0
            if np.any(keep):
                total += float(weight[keep] @ bregman.eval_batch(divergence, tgt[keep], marg[keep], t=ts[keep]))
    return total


def ef_pointwise_minimizer(
    table: EFRateTable,
    divergence: DivergenceSpec,
    a_val: float,
    t: float,
    x: int,
) -> np.ndarray:
    """Numeric argmin of the per-(t, x) rescaled loss over the raw prediction.

    Independent oracle for the hazard-rescaling identity: minimizes
    ``E_{z|x} D(a * conditional rates, m)`` over m with a bounded
    quasi-Newton method (closed-form divergence gradients, tight tolerance).
    """
    post = table.posterior_all(np.array([t]), x)[0]
    targets = [a_val * table.cond_x_target(x, z) for z in range(table.nz)]
    dim = len(table.destinations(x))
    lo, hi = divergence.domain.bounds()

    def objective(m):
        m = np.asarray(m, float)
        val = 0.0
        g = np.zeros(dim)
        for z, tz in enumerate(targets):
            if post[z] <= 0:
                continue
            val += post[z] * bregman.breg_eval(divergence, tz, m, t=t)
            g += post[z] * bregman.breg_grad_b(divergence, tz, m, t=t)
        return val, g

    bounds = None
    if np.any(np.isfinite(lo)) or np.any(np.isfinite(hi)):
        bounds = [
            (lo[i] + 1e-9 if np.isfinite(lo[i]) else None, hi[i] - 1e-9 if np.isfinite(hi[i]) else None)
            for i in range(dim)
        ]
    x0 = np.full(dim, max(0.5, float(np.mean([np.mean(tz) for tz in targets])) * 0.37 + 0.1))
    res = optimize.minimize(objective, x0, jac=True, method="L-BFGS-B", bounds=bounds, tol=1e-16)
    return np.asarray(res.x, float)
