"""Flat experiment configs and the name->object catalogs.

Configs are `key = value` lines with dotted section prefixes; values are
ints, floats, booleans, comma-separated lists, or bare strings.  There are
no expressions: every function a config names (time law, weight, scheduler)
is a catalog entry plus numeric parameters, so an experiment file fully
determines a run.  Serialization uses 17 significant digits and sorted
keys, making parse -> serialize -> parse the identity.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import timeweight as tw
from .errors import ConfigError
from .flowpaths import GaussianMixtureFlowPath, GMMTarget, linear_scheduler, trig_scheduler
from .jumpkernels import KappaScheduler, cosine_kappa, linear_kappa, masked_path_kernel


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return f"{v:.17g}"
    if isinstance(v, (list, tuple)):
        return ", ".join(_format_value(x) for x in v)
    return str(v)


def _parse_scalar(s: str):
    s = s.strip()
    if s.lower() in ("true", "false"):
        return s.lower() == "true"
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        pass
    return s


def parse_config(text: str) -> dict:
    """Parse `key = value` lines; '#' starts a comment."""
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if "," in val:
            out[key] = [_parse_scalar(v) for v in val.split(",")]
        else:
            out[key] = _parse_scalar(val)
    return out


def serialize_config(cfg: dict) -> str:
    lines = [f"{k} = {_format_value(cfg[k])}" for k in sorted(cfg)]
    return "\n".join(lines) + "\n"


def load_config(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text())


# ---------------------------------------------------------------------------
# Catalog resolution
# ---------------------------------------------------------------------------


def section(cfg: dict, prefix: str) -> dict:
    pre = prefix + "."
    return {k[len(pre):]: v for k, v in cfg.items() if k.startswith(pre)}


def build_time_dist(cfg: dict) -> tw.TimeDistribution:
    sec = section(cfg, "time_dist")
    family = sec.get("family", "uniform")
    if family == "uniform":
        return tw.uniform()
    if family == "beta":
        return tw.beta(float(sec.get("a", 2.0)), float(sec.get("b", 2.0)))
    if family == "truncated_exp":
        return tw.truncated_exp(float(sec.get("rate", 1.0)))
    raise ConfigError(f"unknown time_dist.family {family!r} (uniform, beta, truncated_exp)")


def build_weight(cfg: dict) -> tw.WeightFn:
    sec = section(cfg, "weight")
    family = sec.get("family", "const")
    if family == "const":
        return tw.const_weight(float(sec.get("value", 1.0)))
    if family == "linear":
        return tw.linear_weight(float(sec.get("coef", 2.0)))
    if family == "eps_reg":
        return tw.eps_regularized_weight(float(sec.get("eps", 0.1)))
    if family == "sin_pi":
        return tw.sin_pi_weight()
    raise ConfigError(f"unknown weight.family {family!r} (const, linear, eps_reg, sin_pi)")


def build_kappa(name: str) -> KappaScheduler:
    if name == "linear":
        return linear_kappa()
    if name == "cosine":
        return cosine_kappa()
    raise ConfigError(f"unknown kappa scheduler {name!r} (linear, cosine)")


def build_scheduler(name: str):
    if name == "linear":
        return linear_scheduler()
    if name == "trig":
        return trig_scheduler()
    raise ConfigError(f"unknown flow scheduler {name!r} (linear, trig)")


@dataclass
class ExperimentConfig:
    """Validated view of a train/simulate config."""

    kind: str
    seed: int
    raw: dict

    @staticmethod
    def from_dict(cfg: dict) -> "ExperimentConfig":
        kind = cfg.get("experiment.kind")
        if kind not in ("masked_jump", "flow_x1"):
            raise ConfigError(f"experiment.kind must be masked_jump or flow_x1, got {kind!r}")
        if "seed" not in cfg:
            raise ConfigError("seed is mandatory")
        return ExperimentConfig(kind=str(kind), seed=int(cfg["seed"]), raw=dict(cfg))

    def get(self, key, default=None):
        return self.raw.get(key, default)

    def require(self, key):
        if key not in self.raw:
            raise ConfigError(f"missing config key {key!r}")
        return self.raw[key]

    def build_path(self):
        if self.kind == "masked_jump":
            vocab = int(self.get("path.vocab_size", 2))
            prior = self.get("path.prior")
            if prior is not None:
                prior = np.asarray([float(p) for p in np.atleast_1d(prior)], dtype=float)
            kappa = build_kappa(str(self.get("path.kappa", "linear")))
            return masked_path_kernel(vocab, kappa, prior=prior)
        offset = float(self.get("path.offset", 1.0))
        sd = float(self.get("path.sd", 0.5))
        target = GMMTarget([[-offset], [offset]], [[sd**2], [sd**2]], [0.5, 0.5])
        return GaussianMixtureFlowPath(target, build_scheduler(str(self.get("path.scheduler", "linear"))))
