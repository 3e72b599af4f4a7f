"""Portable text serialization for trained models.

Header lines reuse the flat config syntax, then a ``theta:`` marker and one
full-precision decimal per line.  The recorded step count lets training
resume where it stopped.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .config import parse_config, serialize_config
from .errors import ModelFileCorrupt
from .losses import BinnedLinearModel, Model, TimeBinModel


def save_model(path, model: Model, step: int) -> None:
    header: dict = {"step": int(step), "link": model.link}
    if isinstance(model, TimeBinModel):
        header.update(
            kind="time_bin",
            t_edges=[float(v) for v in model.t_edges],
            n_states=model.n_states,
            out_dim=model.out_dim,
        )
    elif isinstance(model, BinnedLinearModel):
        header.update(
            kind="binned_linear",
            t_edges=[float(v) for v in model.t_edges],
            x_edges=[float(v) for v in model.x_edges],
        )
    else:
        raise ModelFileCorrupt(f"no serializer for model type {type(model).__name__}")
    lines = [serialize_config(header).rstrip("\n"), "theta:"]
    lines.extend(f"{v:.17g}" for v in model.theta)
    Path(path).write_text("\n".join(lines) + "\n")


def load_model(path) -> tuple[Model, int]:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ModelFileCorrupt(f"cannot read model file {p}: {exc}") from exc
    try:
        head, _, tail = text.partition("theta:")
        header = parse_config(head)
        theta = np.array([float(v) for v in tail.split()], dtype=float)
        kind = header["kind"]
        step = int(header["step"])
        if kind == "time_bin":
            model = TimeBinModel(
                t_edges=np.asarray(header["t_edges"], float),
                n_states=int(header["n_states"]),
                out_dim=int(header["out_dim"]),
                link=str(header["link"]),
                theta=theta,
            )
        elif kind == "binned_linear":
            model = BinnedLinearModel(
                t_edges=np.asarray(header["t_edges"], float),
                x_edges=np.asarray(header["x_edges"], float),
                link=str(header["link"]),
                theta=theta,
            )
        else:
            raise KeyError(f"unknown model kind {kind!r}")
        return model, step
    except ModelFileCorrupt:
        raise
    except Exception as exc:
        raise ModelFileCorrupt(f"model file {p} failed to parse: {exc}") from exc
