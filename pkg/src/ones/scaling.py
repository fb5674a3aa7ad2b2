"""Batch-size limit policies and learning-rate bookkeeping.

Each job carries a limit ``R`` on its global batch.  It starts at what fits
on one GPU, doubles after each epoch once warm-up is over, is penalised for
long running time, and is halved whenever a waiting job is passed over by a
deployment.  Learning rates follow the linear scaling rule.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional, Union

from ones.domain import Genome, JobRuntime, JobSpec, JobStatus, JobTable


class ScalingReason(enum.Enum):
    START = "start"
    RESUME_REJECTED = "resume_rejected"
    SCALE_UP = "scale_up"
    SCALE_DOWN = "scale_down"
    DEPLOY = "deploy"


@dataclass
class PolicyConfig:
    sigma: Union[float, str] = "auto"  # per-second rate, or "auto" to track arrivals
    warmup_epochs: int = 1
    lambda_estimate: float = 0.0
    floor_at_start_batch: bool = True
    adjust_limits: bool = True  # False: limits stay at the submitted batch (baselines)

    def __post_init__(self):
        if self.sigma != "auto" and not (isinstance(self.sigma, (int, float)) and self.sigma > 0):
            raise ValueError("sigma must be positive or 'auto'")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")

    def current_sigma(self) -> float:
        if self.sigma == "auto":
            return self.lambda_estimate
        return float(self.sigma)


@dataclass(frozen=True)
class ScalingStep:
    time: float
    job_id: int
    reason: ScalingReason
    old_batch: int
    new_batch: int
    old_lr: float
    new_lr: float

    def as_row(self) -> list:
        return [f"{self.time:.6f}", self.job_id, self.reason.value, self.old_batch,
                self.new_batch, f"{self.old_lr:.6g}", f"{self.new_lr:.6g}"]


class ArrivalRateEstimator:
    """Exponential moving average of inter-arrival gaps (half-life in arrivals)."""

    def __init__(self, half_life: float = 20.0):
        self.decay = 0.5 ** (1.0 / half_life)
        self.mean_gap: Optional[float] = None
        self.last_arrival: Optional[float] = None

    def observe(self, t: float) -> None:
        if self.last_arrival is not None:
            gap = t - self.last_arrival
            if self.mean_gap is None:
                self.mean_gap = gap
            else:
                self.mean_gap = self.decay * self.mean_gap + (1 - self.decay) * gap
        self.last_arrival = t

    @property
    def rate(self) -> float:
        if not self.mean_gap:
            return 0.0
        return 1.0 / self.mean_gap


def limit_on_start(job: JobSpec) -> int:
    return min(job.initial_batch_size, job.max_local_batch)


def limit_on_resume_rejected(limit: int, floor: int = 1) -> int:
    # the floor never raises a limit that is already below it
    return max(min(limit, max(limit // 2, floor)), 1)


def limit_on_epoch(limit: int, cap: int) -> int:
    return min(2 * limit, cap)


def limit_on_scale_down(limit: int, executed_time: float, sigma: float, floor: int = 1) -> int:
    """``ceil(2R / ceil(sigma * T + 1))``; jobs younger than ``1/sigma`` keep ``R``."""
    divisor = math.ceil(sigma * executed_time + 1.0)
    return max(math.ceil(2 * limit / divisor), floor, 1)


def scaled_learning_rate(lr0: float, batch0: int, new_batch: int) -> float:
    if batch0 < 1:
        raise ValueError("reference batch must be >= 1")
    return lr0 * new_batch / batch0


def _floor(rt: JobRuntime, config: PolicyConfig) -> int:
    return limit_on_start(rt.spec) if config.floor_at_start_batch else 1


def on_arrival(rt: JobRuntime, config: PolicyConfig) -> None:
    rt.batch_limit = limit_on_start(rt.spec) if config.adjust_limits else rt.spec.initial_batch_size


def on_epoch(rt: JobRuntime, config: PolicyConfig, cluster_gpus: int) -> None:
    """Scale-up then scale-down at an epoch boundary of a running job."""
    if not config.adjust_limits or rt.epochs_completed < config.warmup_epochs:
        return
    cap = cluster_gpus * rt.spec.max_local_batch
    limit = limit_on_epoch(rt.batch_limit, cap)
    sigma = config.current_sigma()
    if sigma > 0:
        limit = limit_on_scale_down(limit, rt.executed_time, sigma, _floor(rt, config))
    limit = min(limit, cap)
    # growth between two deployments stays within 2x of the running batch
    if rt.global_batch > 0:
        limit = min(limit, 2 * rt.global_batch)
    rt.batch_limit = max(limit, 1)


def apply_policies(jobs: JobTable, deployed: Genome, now: float,
                   config: PolicyConfig) -> list[ScalingStep]:
    """Settle limits and batch sizes for a newly deployed genome.

    Waiting jobs left out of the deployment have their limit halved.  Jobs
    whose global batch changes get their learning rate rescaled linearly from
    the submitted (batch, lr) and a ``ScalingStep`` is emitted.
    """
    alloc = deployed.allocation()
    steps = []
    for job_id in sorted(jobs):
        rt = jobs[job_id]
        if rt.is_completed:
            continue
        a = alloc.get(job_id)
        if a is None:
            if rt.is_waiting and config.adjust_limits:
                rt.batch_limit = limit_on_resume_rejected(rt.batch_limit, _floor(rt, config))
            if rt.is_running:
                rt.previous_gpu_count = rt.gpu_count
                rt.global_batch = 0
                rt.gpu_count = 0
            continue
        old_batch = rt.global_batch
        new_batch = a.global_batch
        if new_batch != old_batch:
            spec = rt.spec
            new_lr = scaled_learning_rate(spec.initial_learning_rate, spec.initial_batch_size,
                                          new_batch)
            if not rt.has_started:
                reason = ScalingReason.START
            elif old_batch == 0:
                reason = ScalingReason.DEPLOY
            elif new_batch > old_batch:
                reason = ScalingReason.SCALE_UP
            else:
                reason = ScalingReason.SCALE_DOWN
            steps.append(ScalingStep(now, job_id, reason, old_batch, new_batch,
                                     rt.current_learning_rate, new_lr))
            rt.current_learning_rate = new_lr
        rt.global_batch = new_batch
        rt.gpu_count = a.gpu_count
        if config.adjust_limits:
            # a resumed job may not come back at more than twice this batch
            rt.batch_limit = min(rt.batch_limit, 2 * new_batch)
    return steps


def mark_status(rt: JobRuntime, running: bool) -> None:
    rt.status = JobStatus.RUNNING if running else JobStatus.WAITING
