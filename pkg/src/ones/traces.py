"""Synthetic workload traces: job templates, Poisson generation and CSV files.

File layout: ``#`` comment lines carrying ``key=value`` header fields, then a
CSV table with the columns in ``COLUMNS``.  Row order gives job ids.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from ones.domain import ClusterSpec, JobSpec
from ones.throughput import ThroughputModelParams, job_throughput

COLUMNS = ["arrival", "template", "epoch_size", "total_workload", "init_batch", "init_lr",
           "max_local_batch", "peak", "half_batch", "gamma", "curve_k", "noise"]


@dataclass(frozen=True)
class JobTemplate:
    """Parameter ranges for one model/dataset family (uniform draws within ranges)."""

    name: str
    epoch_sizes: tuple[int, ...]
    epochs: tuple[float, float]  # epochs to converge, drawn log-uniformly
    init_batch: int
    init_lr: float
    max_local_batch: int
    peak: tuple[float, float]
    half_batch: tuple[float, float]
    gamma: tuple[float, float]
    curve_k: tuple[float, float] = (2.5, 4.0)
    noise: float = 0.02
    loss_init: float = 2.3

    def __post_init__(self):
        if not self.epoch_sizes:
            raise ValueError(f"{self.name}: no epoch sizes")
        for lo, hi in (self.epochs, self.peak, self.half_batch, self.gamma, self.curve_k):
            if not 0 < lo <= hi:
                raise ValueError(f"{self.name}: empty or non-positive range ({lo}, {hi})")
        if self.init_batch > self.max_local_batch:
            raise ValueError(f"{self.name}: initial batch must fit on one GPU")


def _steps(lo: int, hi: int, step: int) -> tuple[int, ...]:
    return tuple(range(lo, hi + 1, step))


# Ranges are illustrative: they give a heavy-tailed mix of GPU time, from
# minute-long fine-tuning jobs to hour-long image-classification runs.
DEFAULT_TEMPLATES: tuple[JobTemplate, ...] = (
    JobTemplate("alexnet-imagenet", _steps(10_000, 20_000, 2_000), (8, 40), 128, 0.01, 256,
                (1100, 1500), (32, 64), (0.06, 0.12), loss_init=2.7),
    JobTemplate("resnet50-imagenet", _steps(10_000, 20_000, 2_000), (8, 40), 32, 0.0125, 64,
                (260, 340), (12, 24), (0.03, 0.06), loss_init=2.7),
    JobTemplate("vgg16-imagenet", _steps(10_000, 20_000, 2_000), (8, 40), 32, 0.01, 64,
                (200, 260), (12, 24), (0.08, 0.14), loss_init=2.7),
    JobTemplate("inceptionv3-imagenet", _steps(10_000, 20_000, 2_000), (8, 40), 32, 0.0125, 64,
                (220, 300), (12, 24), (0.04, 0.08), loss_init=2.7),
    JobTemplate("resnet18-cifar10", _steps(20_000, 40_000, 5_000), (10, 60), 128, 0.1, 512,
                (2600, 3400), (48, 96), (0.04, 0.08), loss_init=2.3),
    JobTemplate("vgg16-cifar10", _steps(20_000, 40_000, 5_000), (10, 60), 128, 0.05, 512,
                (1600, 2200), (48, 96), (0.08, 0.14), loss_init=2.3),
    JobTemplate("googlenet-cifar10", _steps(20_000, 40_000, 5_000), (10, 60), 128, 0.1, 256,
                (900, 1300), (32, 64), (0.04, 0.08), loss_init=2.3),
    JobTemplate("bert-cola", _steps(5_000, 8_000, 1_000), (3, 12), 16, 2e-5, 32,
                (90, 130), (6, 12), (0.05, 0.10), loss_init=0.69),
    JobTemplate("bert-mrpc", (3_600,), (3, 12), 16, 2e-5, 32,
                (90, 130), (6, 12), (0.05, 0.10), loss_init=0.69),
    JobTemplate("bert-sst2", _steps(10_000, 20_000, 2_000), (3, 12), 32, 2e-5, 32,
                (90, 130), (6, 12), (0.05, 0.10), loss_init=0.69),
)

TEMPLATES_BY_NAME = {t.name: t for t in DEFAULT_TEMPLATES}
FALLBACK_LOSS_INIT = 2.3


@dataclass
class TraceFile:
    jobs: list[JobSpec]
    cluster: Optional[ClusterSpec] = None
    seed: Optional[int] = None
    arrival_rate: Optional[float] = None

    def __eq__(self, other):
        if not isinstance(other, TraceFile):
            return NotImplemented
        return (self.jobs == other.jobs and self.cluster == other.cluster
                and self.seed == other.seed and self.arrival_rate == other.arrival_rate)


def _draw_job(template: JobTemplate, job_id: int, arrival: float,
              rng: np.random.Generator) -> JobSpec:
    epoch_size = int(rng.choice(template.epoch_sizes))
    lo, hi = template.epochs
    epochs = math.exp(rng.uniform(math.log(lo), math.log(hi)))
    total = max(epoch_size, int(round(epochs * epoch_size)))
    params = ThroughputModelParams(
        per_gpu_peak=round(float(rng.uniform(*template.peak)), 3),
        half_batch=round(float(rng.uniform(*template.half_batch)), 3),
        comm_penalty=round(float(rng.uniform(*template.gamma)), 5),
    )
    return JobSpec(
        job_id=job_id, arrival_time=round(arrival, 6), epoch_size=epoch_size,
        total_workload=total, initial_batch_size=template.init_batch,
        initial_learning_rate=template.init_lr, max_local_batch=template.max_local_batch,
        loss_init=template.loss_init, throughput=params,
        curve_k=round(float(rng.uniform(*template.curve_k)), 4), curve_noise=template.noise,
        template=template.name)


def generate(n_jobs: int, arrival_rate: float, seed: int,
             templates: Sequence[JobTemplate] = DEFAULT_TEMPLATES,
             cluster: Optional[ClusterSpec] = None) -> TraceFile:
    """Poisson arrivals at ``arrival_rate`` jobs/s; each job from a uniformly chosen template."""
    if n_jobs < 1:
        raise ValueError("n_jobs must be >= 1")
    if arrival_rate <= 0:
        raise ValueError("arrival rate must be positive")
    if not templates:
        raise ValueError("need at least one template")
    rng = np.random.default_rng(seed)
    gaps = rng.exponential(1.0 / arrival_rate, size=n_jobs)
    arrivals = np.cumsum(gaps)
    picks = rng.integers(len(templates), size=n_jobs)
    jobs = [_draw_job(templates[p], i, float(a), rng)
            for i, (p, a) in enumerate(zip(picks, arrivals))]
    return TraceFile(jobs, cluster, seed, arrival_rate)


def _fmt(x: float) -> str:
    return repr(float(x))


def dumps(trace: TraceFile) -> str:
    buf = io.StringIO()
    if trace.cluster is not None:
        buf.write(f"# nodes={trace.cluster.nodes}\n")
        buf.write(f"# gpus_per_node={trace.cluster.gpus_per_node}\n")
    if trace.seed is not None:
        buf.write(f"# seed={trace.seed}\n")
    if trace.arrival_rate is not None:
        buf.write(f"# lambda={_fmt(trace.arrival_rate)}\n")
    buf.write(f"# n_jobs={len(trace.jobs)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for j in trace.jobs:
        tp = j.throughput
        w.writerow([_fmt(j.arrival_time), j.template, j.epoch_size, j.total_workload,
                    j.initial_batch_size, _fmt(j.initial_learning_rate), j.max_local_batch,
                    _fmt(tp.per_gpu_peak), _fmt(tp.half_batch), _fmt(tp.comm_penalty),
                    _fmt(j.curve_k), _fmt(j.curve_noise)])
    return buf.getvalue()


def save(trace: TraceFile, path: Union[str, Path]) -> None:
    Path(path).write_text(dumps(trace))


class TraceError(ValueError):
    pass


_HEADER_KEYS = {"nodes", "gpus_per_node", "seed", "lambda", "n_jobs"}


def loads(text: str) -> TraceFile:
    header: dict[str, str] = {}
    jobs: list[JobSpec] = []
    columns: Optional[list[str]] = None
    last_arrival = -math.inf
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if "=" in body:
                key, value = (s.strip() for s in body.split("=", 1))
                if key not in _HEADER_KEYS:
                    raise TraceError(f"line {lineno}: unknown header field {key!r}")
                header[key] = value
            continue
        cells = next(csv.reader([line]))
        if columns is None:
            unknown = [c for c in cells if c not in COLUMNS]
            if unknown:
                raise TraceError(f"line {lineno}: unknown column(s) {', '.join(unknown)}")
            if cells != COLUMNS:
                raise TraceError(f"line {lineno}: expected columns {','.join(COLUMNS)}")
            columns = cells
            continue
        if len(cells) != len(COLUMNS):
            raise TraceError(f"line {lineno}: expected {len(COLUMNS)} fields, got {len(cells)}")
        row = dict(zip(COLUMNS, cells))
        try:
            arrival = float(row["arrival"])
            if arrival < last_arrival:
                raise TraceError(f"line {lineno}: arrival {arrival} precedes previous row")
            last_arrival = arrival
            template = TEMPLATES_BY_NAME.get(row["template"])
            spec = JobSpec(
                job_id=len(jobs), arrival_time=arrival, epoch_size=int(row["epoch_size"]),
                total_workload=int(row["total_workload"]),
                initial_batch_size=int(row["init_batch"]),
                initial_learning_rate=float(row["init_lr"]),
                max_local_batch=int(row["max_local_batch"]),
                loss_init=template.loss_init if template else FALLBACK_LOSS_INIT,
                throughput=ThroughputModelParams(float(row["peak"]), float(row["half_batch"]),
                                                 float(row["gamma"])),
                curve_k=float(row["curve_k"]), curve_noise=float(row["noise"]),
                template=row["template"])
        except TraceError:
            raise
        except ValueError as exc:
            raise TraceError(f"line {lineno}: {exc}") from None
        if spec.initial_batch_size > spec.max_local_batch:
            raise TraceError(f"line {lineno}: init_batch exceeds max_local_batch")
        jobs.append(spec)
    if columns is None:
        raise TraceError("missing column header")
    cluster = None
    if "nodes" in header and "gpus_per_node" in header:
        cluster = ClusterSpec(int(header["nodes"]), int(header["gpus_per_node"]))
    if "n_jobs" in header and int(header["n_jobs"]) != len(jobs):
        raise TraceError(f"header says {header['n_jobs']} jobs, file has {len(jobs)}")
    return TraceFile(jobs, cluster,
                     int(header["seed"]) if "seed" in header else None,
                     float(header["lambda"]) if "lambda" in header else None)


def load(path: Union[str, Path]) -> TraceFile:
    return loads(Path(path).read_text())


def single_gpu_time(spec: JobSpec) -> float:
    """Seconds the job needs alone on one GPU at its submitted batch."""
    return spec.total_workload / job_throughput(spec.throughput, spec.initial_batch_size, 1)


def gpu_time_histogram(trace: TraceFile, edges: Sequence[float] = (60, 300, 900, 1800, 3600,
                                                                    7200)) -> list[tuple[str, int]]:
    """Counts of jobs per single-GPU-time bucket (seconds)."""
    times = [single_gpu_time(j) for j in trace.jobs]
    bounds = [0.0, *edges, math.inf]
    out = []
    for lo, hi in zip(bounds, bounds[1:]):
        label = f"[{lo:g},{hi:g})"
        out.append((label, sum(1 for t in times if lo <= t < hi)))
    return out


def summary_lines(trace: TraceFile) -> list[str]:
    jobs = trace.jobs
    gaps = np.diff([0.0] + [j.arrival_time for j in jobs])
    times = np.array([single_gpu_time(j) for j in jobs])
    lines = [f"jobs = {len(jobs)}",
             f"last_arrival = {jobs[-1].arrival_time:.3f}",
             f"mean_interarrival = {gaps.mean():.3f}",
             f"mean_single_gpu_time = {times.mean():.3f}",
             f"total_single_gpu_time = {times.sum():.3f}"]
    for label, count in gpu_time_histogram(trace):
        lines.append(f"gpu_time{label} = {count}")
    return lines
