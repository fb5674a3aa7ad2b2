"""Per-job outcome records, summary statistics and CSV writers."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

RECORD_COLUMNS = ["job_id", "arrival", "start", "finish", "jct", "queuing", "execution",
                  "final_batch", "preemptions"]
SUMMARY_FIELDS = ["jct", "queuing", "execution"]


@dataclass(frozen=True)
class MetricsRecord:
    job_id: int
    arrival: float
    start: float
    finish: float
    jct: float
    queuing: float
    execution: float  # includes scaling overhead
    final_batch: int
    preemptions: int
    reconfigurations: int = 0
    overhead: float = 0.0

    def as_row(self) -> list:
        return [self.job_id, f"{self.arrival:.6f}", f"{self.start:.6f}", f"{self.finish:.6f}",
                f"{self.jct:.6f}", f"{self.queuing:.6f}", f"{self.execution:.6f}",
                self.final_batch, self.preemptions]


@dataclass(frozen=True)
class Stats:
    mean: float
    median: float
    p95: float
    max: float


@dataclass(frozen=True)
class Summary:
    count: int
    stats: dict[str, Stats]
    cf_curve: list[tuple[float, float]]  # (jct, cumulative fraction)

    def dumps(self) -> str:
        lines = [f"jobs = {self.count}"]
        for name in SUMMARY_FIELDS:
            s = self.stats[name]
            for key in ("mean", "median", "p95", "max"):
                lines.append(f"{name}_{key} = {getattr(s, key):.6f}")
        return "\n".join(lines) + "\n"


def _stats(values: np.ndarray) -> Stats:
    return Stats(float(values.mean()), float(np.median(values)),
                 float(np.percentile(values, 95)), float(values.max()))


def cf_curve(values: Iterable[float]) -> list[tuple[float, float]]:
    """Sorted values paired with the fraction of values at or below each one."""
    v = np.sort(np.asarray(list(values), dtype=float))
    n = len(v)
    return [(float(x), (i + 1) / n) for i, x in enumerate(v)]


def aggregate(records: Sequence[MetricsRecord]) -> Summary:
    if not records:
        raise ValueError("aggregate needs at least one record")
    stats = {name: _stats(np.array([getattr(r, name) for r in records]))
             for name in SUMMARY_FIELDS}
    return Summary(len(records), stats, cf_curve(r.jct for r in records))


def records_csv(records: Sequence[MetricsRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_COLUMNS)
    for r in sorted(records, key=lambda r: r.job_id):
        w.writerow(r.as_row())
    return buf.getvalue()


def cf_csv(curve: Sequence[tuple[float, float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["jct", "fraction"])
    for x, f in curve:
        w.writerow([f"{x:.6f}", f"{f:.6f}"])
    return buf.getvalue()


def improvement(baseline_mean: float, ones_mean: float) -> float:
    """Percentage reduction of ``ones_mean`` relative to ``baseline_mean``."""
    if baseline_mean <= 0:
        raise ValueError("baseline mean must be positive")
    return 100.0 * (baseline_mean - ones_mean) / baseline_mean
