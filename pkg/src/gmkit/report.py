"""Aggregate result records into a markdown table, tidy CSVs, and figures.

Walks a results directory for suite outputs (`records.csv`, `detail.csv`),
loss traces, and distance reports; emits one markdown summary, a merged
long-format CSV, and a PNG per plottable artifact.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .errors import EmptyResults
from .records import read_records_csv, write_tidy_csv


def _collect(results_dir: Path):
    records = []
    for path in sorted(results_dir.rglob("records.csv")):
        suite = path.parent.name if path.parent != results_dir else "root"
        for row in read_records_csv(path):
            row["suite"] = suite
            records.append(row)
    details = sorted(results_dir.rglob("detail.csv"))
    traces = sorted(results_dir.rglob("loss_trace.csv"))
    distances = sorted(results_dir.rglob("distance.json")) + sorted(results_dir.rglob("final_metrics.json"))
    return records, details, traces, distances


def _markdown_table(records) -> str:
    lines = [
        "| suite | check | metric | value | tolerance | pass |",
        "|---|---|---|---|---|---|",
    ]
    for r in records:
        tol = r["tolerance"] if r["tolerance"] else "-"
        flag = "pass" if r["pass"] == "true" else "**FAIL**"
        lines.append(f"| {r['suite']} | {r['experiment']} | {r['metric']} | {r['value']} | {tol} | {flag} |")
    return "\n".join(lines)


def _fig_records(records, out_path: Path) -> None:
    rows = [r for r in records if r["tolerance"]]
    if not rows:
        return
    labels = [f"{r['experiment']}:{r['metric']}" for r in rows]
    vals = np.array([max(abs(float(r["value"])), 1e-18) for r in rows])
    tols = np.array([float(r["tolerance"]) if float(r["tolerance"]) > 0 else 1e-18 for r in rows])
    fig, ax = plt.subplots(figsize=(8, max(2.5, 0.28 * len(rows))))
    y = np.arange(len(rows))
    colors = ["tab:green" if r["pass"] == "true" else "tab:red" for r in rows]
    ax.barh(y, vals / tols, color=colors, alpha=0.8)
    ax.axvline(1.0, color="k", lw=1, ls="--", label="tolerance")
    ax.set_xscale("log")
    ax.set_yticks(y)
    ax.set_yticklabels(labels, fontsize=6)
    ax.invert_yaxis()
    ax.set_xlabel("|value| / tolerance (log)")
    ax.legend(loc="lower right", fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)


def _fig_detail(detail_path: Path, out_path: Path) -> None:
    rows = list(csv.DictReader(open(detail_path, newline="")))
    if not rows:
        return
    fig, ax = plt.subplots(figsize=(6, 3.5))
    keys = sorted({(r["experiment"], r["metric"]) for r in rows})
    for exp, metric in keys:
        pts = [(float(r["t"]), float(r["value"])) for r in rows if r["experiment"] == exp and r["metric"] == metric]
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], lw=1, label=f"{exp}:{metric}"[:60])
    ax.set_xlabel("t")
    if len(keys) <= 8:
        ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)


def _fig_trace(trace_path: Path, out_path: Path) -> None:
    rows = list(csv.DictReader(open(trace_path, newline="")))
    if not rows:
        return
    steps = np.array([int(r["step"]) for r in rows])
    losses = np.array([float(r["loss"]) for r in rows])
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, losses, lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log" if np.all(losses > 0) else "linear")
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)


def generate_report(results_dir, out_dir=None, quiet: bool = False) -> int:
    """Build report.md, tidy.csv, and figures; exit code 1 on any failure."""
    results_dir = Path(results_dir)
    out_dir = Path(out_dir) if out_dir else results_dir
    if not results_dir.is_dir():
        raise EmptyResults(f"results directory {results_dir} does not exist")
    records, details, traces, distances = _collect(results_dir)
    if not records and not traces and not distances:
        raise EmptyResults(f"no result files under {results_dir}")
    out_dir.mkdir(parents=True, exist_ok=True)

    n_failed = sum(r["pass"] == "false" for r in records)
    parts = ["# Verification report", ""]
    if records:
        parts += [f"{len(records)} checks, {n_failed} failed.", "", _markdown_table(records), ""]
        _fig_records(records, out_dir / "fig_checks.png")
    tidy_rows = []
    for r in records:
        tidy_rows.append((f"{r['suite']}/{r['experiment']}", 0.0, r["metric"], float(r["value"])))
    for path in details:
        for row in csv.DictReader(open(path, newline="")):
            tidy_rows.append((row["experiment"], float(row["t"]), row["metric"], float(row["value"])))
        _fig_detail(path, out_dir / f"fig_detail_{path.parent.name}.png")
    for path in traces:
        name = path.parent.name
        for row in csv.DictReader(open(path, newline="")):
            tidy_rows.append((f"train/{name}", float(row["step"]), "loss", float(row["loss"])))
        _fig_trace(path, out_dir / f"fig_trace_{name}.png")
        parts.append(f"Loss trace `{path}` rendered to fig_trace_{name}.png.")
    if distances:
        parts += ["", "## Run metrics", ""]
        for path in distances:
            payload = json.loads(path.read_text())
            parts.append(f"- `{path.relative_to(results_dir)}`:")
            for k in sorted(payload):
                parts.append(f"    - {k} = {payload[k]}")
    write_tidy_csv(out_dir / "tidy.csv", tidy_rows)
    (out_dir / "report.md").write_text("\n".join(parts) + "\n")
    if not quiet:
        print(f"report: {len(records)} checks, {n_failed} failed -> {out_dir / 'report.md'}")
    return 1 if n_failed else 0
