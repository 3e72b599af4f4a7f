"""Train and simulate experiment drivers behind the command line.

Two experiment kinds are wired up end to end:

* ``masked_jump`` — rate-multiplier prediction on the single-site masked
  path, trained with the conditional loss and simulated as a CTMC.
* ``flow_x1`` — endpoint prediction on a two-Gaussian mixture, trained with
  the endpoint squared-error loss and sampled with the Euler flow.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import stats

from . import bregman as br
from . import losses as ls
from . import simulate as sim
from .config import ExperimentConfig, build_time_dist, build_weight
from .errors import ConfigError
from .flowpaths import GaussianMixtureFlowPath, gmm_posterior_x1_mean
from .jumpkernels import MaskedTokenPath
from .modelio import load_model, save_model
from .records import _fmt
from .streams import substream


def build_divergence(exp: ExperimentConfig, dim: int) -> tuple[br.DivergenceSpec, str]:
    family = str(exp.get("divergence.family", "bce" if exp.kind == "masked_jump" else "mse"))
    links = {"mse": "identity", "poisson": "exp", "bce": "sigmoid"}
    ctors = {"mse": br.mse, "poisson": br.poisson, "bce": br.bce}
    if family not in ctors:
        raise ConfigError(f"unknown divergence.family {family!r} (mse, poisson, bce)")
    return ctors[family](dim), links[family]


def build_spec_and_model(exp: ExperimentConfig):
    path = exp.build_path()
    time_dist = build_time_dist(exp.raw)
    weight = build_weight(exp.raw)
    batch = int(exp.get("train.batch", 2048))
    if exp.kind == "masked_jump":
        vocab = path.vocab_size
        divergence, link = build_divergence(exp, vocab)
        t_bins = int(exp.get("model.t_bins", 8))
        model = ls.TimeBinModel(
            t_edges=np.linspace(0.0, 1.0, t_bins + 1),
            n_states=path.space.n,
            out_dim=vocab,
            link=link,
        )
    else:
        divergence, link = build_divergence(exp, 1)
        if link != "identity":
            raise ConfigError("flow_x1 uses the identity link; pick divergence.family = mse")
        t_bins = int(exp.get("model.t_bins", 25))
        x_lo = float(exp.get("model.x_lo", -3.5))
        x_hi = float(exp.get("model.x_hi", 3.5))
        x_bins = int(exp.get("model.x_bins", 28))
        model = ls.BinnedLinearModel(
            t_edges=np.linspace(0.0, 1.0, t_bins + 1),
            x_edges=np.linspace(x_lo, x_hi, x_bins + 1),
        )
    spec = ls.LossSpec(
        path=path,
        divergence=divergence,
        time_dist=time_dist,
        weight=weight,
        n_samples=batch,
        seed=exp.seed,
    )
    return spec, model


# ---------------------------------------------------------------------------
# Probe grids and final metrics
# ---------------------------------------------------------------------------


def masked_probe_error(path: MaskedTokenPath, model: ls.Model, ts=None) -> float:
    """Max |predicted multipliers - exact posterior| at the mask state."""
    ts = np.linspace(0.05, 0.95, 19) if ts is None else np.asarray(ts, float)
    worst = 0.0
    for t in ts:
        pred = model.predict(float(t), 0)
        exact = path.posterior(float(t), 0)
        worst = max(worst, float(np.max(np.abs(pred - exact))))
    return worst


def trained_kfe_residual(path: MaskedTokenPath, model: ls.Model, grid=None) -> float:
    grid = np.linspace(0.01, 0.99, 99) if grid is None else np.asarray(grid, float)

    def rates(t):
        return path.model_rate_matrix(t, lambda tt, x: model.predict(tt, x)[: path.target_dim(x)])

    res, _ = sim.kfe_residual(path.p_t, rates, grid)
    return res


def flow_probe_cells(path: GaussianMixtureFlowPath, model: ls.BinnedLinearModel, min_mass: float = 0.003):
    """(t, x) cell centers carrying at least `min_mass` sampling probability."""
    t_edges, x_edges = model.t_edges, model.x_edges
    t_centers = 0.5 * (t_edges[:-1] + t_edges[1:])
    x_centers = 0.5 * (x_edges[:-1] + x_edges[1:])
    cells = []
    tgt = path.target
    for ti in range(t_centers.size):
        tc = float(t_centers[ti])
        if not (0.1 <= tc <= 0.95):
            continue
        p_t = float(t_edges[ti + 1] - t_edges[ti])  # uniform time law on the cell
        a, s = path.scheduler.alpha(tc), path.scheduler.sigma(tc)
        for xi in range(x_centers.size):
            mass = 0.0
            for m, v, w in zip(tgt.means[:, 0], tgt.variances[:, 0], tgt.weights):
                sd = math.sqrt(a * a * v + s * s)
                mass += w * (
                    stats.norm.cdf((x_edges[xi + 1] - a * m) / sd) - stats.norm.cdf((x_edges[xi] - a * m) / sd)
                )
            if p_t * mass >= min_mass:
                cells.append((tc, float(x_centers[xi])))
    return cells


def flow_probe_error(path: GaussianMixtureFlowPath, model: ls.Model, cells) -> float:
    worst = 0.0
    for tc, xc in cells:
        pred = model.predict(tc, np.array([xc]))[0]
        exact = gmm_posterior_x1_mean(path.target, path.scheduler, tc, [xc])[0]
        worst = max(worst, abs(pred - exact))
    return worst


# ---------------------------------------------------------------------------
# Command bodies
# ---------------------------------------------------------------------------


def run_train(exp: ExperimentConfig, out_dir: Path, jobs: int = 1, quiet: bool = False) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    spec, model = build_spec_and_model(exp)
    steps = int(exp.get("train.steps", 1000))
    lr = float(exp.get("train.lr", 0.5))
    decay = float(exp.get("train.decay", 1.0))
    exact = bool(exp.get("train.exact", False))
    trace_every = int(exp.get("train.trace_every", 1))
    resume = bool(exp.get("train.resume", False))

    model_path = out_dir / "model.txt"
    trace_path = out_dir / "loss_trace.csv"
    start_step = 0
    if resume:
        model, start_step = load_model(model_path)

    result = ls.train(
        spec,
        model,
        steps=steps,
        lr=lr,
        decay=decay,
        exact=exact,
        start_step=start_step,
        jobs=jobs,
        trace_every=trace_every,
    )
    save_model(model_path, result.model, result.final_step)

    mode = "a" if (resume and trace_path.exists()) else "w"
    with open(trace_path, mode, newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if mode == "w":
            writer.writerow(("step", "loss", "std_error"))
        for k, l, s in zip(result.steps, result.losses, result.stderrs):
            writer.writerow((int(k), _fmt(float(l)), _fmt(float(s))))

    metrics: dict = {"final_step": int(result.final_step), "experiment": exp.kind}
    if steps > 0:
        metrics["first_loss"] = float(result.losses[0])
        metrics["final_loss"] = float(result.losses[-1])
    if exp.kind == "masked_jump":
        metrics["probe_max_abs_error"] = masked_probe_error(spec.path, result.model)
        metrics["trained_kfe_residual"] = trained_kfe_residual(spec.path, result.model)
        metrics["exact_rate_kfe_residual"] = sim.kfe_residual(
            spec.path.p_t, spec.path.exact_rate_matrix, np.linspace(0.01, 0.99, 99)
        )[0]
    else:
        cells = flow_probe_cells(spec.path, result.model, float(exp.get("probe.min_mass", 0.003)))
        metrics["probe_cells"] = len(cells)
        metrics["probe_max_abs_error"] = flow_probe_error(spec.path, result.model, cells)
    (out_dir / "final_metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    if not quiet:
        print(f"trained {exp.kind}: {steps} steps -> {model_path}")
        for k, v in sorted(metrics.items()):
            print(f"  {k} = {v}")
    return metrics


def model_velocity(model: ls.Model, eps: float = 0.0):
    """Endpoint-prediction drift (x1_hat - x) / (1 - t + eps) for the linear scheduler."""

    def velocity(t: float, x: np.ndarray) -> np.ndarray:
        pred = model.predict_batch(np.full(x.shape[0], t), x)
        return (pred - x) / (1.0 - t + eps)

    return velocity


def run_simulate(exp: ExperimentConfig, model_path: Path, out_dir: Path, quiet: bool = False) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    model, _ = load_model(model_path)
    n_traj = int(exp.get("sim.n_trajectories", 10_000))
    report: dict = {"experiment": exp.kind, "n_trajectories": n_traj}

    if exp.kind == "masked_jump":
        path = exp.build_path()
        t_max = float(exp.get("sim.t_max", 1.0 - 1e-4))
        cfg = sim.SimConfig(n_trajectories=n_traj, seed=exp.seed, t_max=t_max)

        def multipliers(t, x, z):
            dim = path.target_dim(x)
            return model.predict(t, x)[:dim] if dim else np.empty(0)

        result = sim.ctmc_simulate(path.kernel, multipliers, cfg, init_state=0)
        with open(out_dir / "counts.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(("state", "count"))
            for label, c in zip(path.space.states, result.dist.counts):
                writer.writerow((label, int(c)))
        p1 = np.concatenate([[0.0], path.latent_prior])
        dist_p1 = sim.dist_distance(result.dist, p1)
        dist_tmax = sim.dist_distance(result.dist, path.p_t(t_max))
        report.update(
            tv_vs_p1=dist_p1.tv,
            tv_vs_p_tmax=dist_tmax.tv,
            truncation_bias=float(path.kappa.kappa(1.0) - path.kappa.kappa(t_max)),
            mean_jumps=result.mean_jumps,
            max_jumps=result.max_jumps,
        )
    else:
        path = exp.build_path()
        dt = float(exp.get("sim.dt", 1e-3))
        cfg = sim.SimConfig(n_trajectories=n_traj, seed=exp.seed, dt=dt)
        out = sim.euler_flow(model_velocity(model), cfg, dim=1)
        with open(out_dir / "samples.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(("index", "x0"))
            for i, v in enumerate(out.samples[:, 0]):
                writer.writerow((i, _fmt(float(v))))
        oracle_n = int(exp.get("sim.oracle_n", 100_000))
        oracle = path.target.sample(substream(exp.seed, 999_983), oracle_n)
        rep = sim.dist_distance(out, oracle, seed=exp.seed, n_permutations=40)
        report.update(
            mean=float(out.samples[:, 0].mean()),
            variance=float(out.samples[:, 0].var(ddof=1)),
            target_mean=float(path.target.mean()[0]),
            target_variance=float(path.target.variance()[0]),
            mean_delta=float(rep.mean_delta[0]),
            energy_distance=rep.energy,
            energy_z=rep.energy_z,
        )
    (out_dir / "distance.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    if not quiet:
        print(f"simulated {exp.kind}: {n_traj} trajectories -> {out_dir}")
        for k, v in sorted(report.items()):
            print(f"  {k} = {v}")
    return report
