"""Result records and their CSV/JSON serialization.

One row per check: a metric value, an optional tolerance, and the pass flag
(|value| <= tolerance when a tolerance is present).  Floats go out with 17
significant digits so reruns with the same seed are byte-identical; the
wall-time column is the one field excluded from that contract.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .errors import EmptyResults

CSV_COLUMNS = ("experiment", "metric", "value", "std_error", "tolerance", "pass", "wall_time_s")


def _fmt(v: Optional[float]) -> str:
    if v is None:
        return ""
    return f"{float(v):.17g}"


@dataclass
class ResultRecord:
    experiment: str
    metric: str
    value: float
    std_error: Optional[float] = None
    tolerance: Optional[float] = None
    wall_time_s: float = 0.0

    @property
    def passed(self) -> bool:
        if self.tolerance is None:
            return True
        return abs(self.value) <= self.tolerance

    def row(self) -> list[str]:
        return [
            self.experiment,
            self.metric,
            _fmt(self.value),
            _fmt(self.std_error),
            _fmt(self.tolerance),
            "true" if self.passed else "false",
            f"{self.wall_time_s:.6f}",
        ]


def records_to_csv(records: list[ResultRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in records:
        writer.writerow(r.row())
    return buf.getvalue()


def write_records_csv(path, records: list[ResultRecord]) -> None:
    Path(path).write_text(records_to_csv(records))


def read_records_csv(path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append(row)
    if not rows:
        raise EmptyResults(f"{path} holds no records")
    return rows


def write_summary_json(path, suite: str, records: list[ResultRecord], extra: Optional[dict] = None) -> None:
    payload = {
        "suite": suite,
        "n_checks": len(records),
        "n_failed": sum(not r.passed for r in records),
        "all_passed": all(r.passed for r in records),
        "checks": [
            {
                "experiment": r.experiment,
                "metric": r.metric,
                "value": r.value,
                "std_error": r.std_error,
                "tolerance": r.tolerance,
                "pass": r.passed,
            }
            for r in records
        ],
    }
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def write_tidy_csv(path, rows: list[tuple]) -> None:
    """Long-format rows (experiment, t, metric, value) for external plotting."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("experiment", "t", "metric", "value"))
    for exp, t, metric, value in rows:
        writer.writerow((exp, _fmt(t), metric, _fmt(value)))
    Path(path).write_text(buf.getvalue())
