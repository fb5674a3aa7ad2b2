"""Brute-force optimum of the utilization score on tiny instances.

A micro-instance has at most 4 GPUs on one node, 3 jobs and 3 allowed
global batch sizes per job.  The oracle enumerates every saturated schedule
(no GPU is idle while some job could still use it) and evaluates the score
from first principles with progress fixed at the Beta means, so it shares no
code with the evolutionary search it checks.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ones.domain import ClusterSpec, Genome, JobRuntime, JobSpec, JobStatus
from ones.evolution import EvolutionConfig, SearchContext, evolve_round, init_population
from ones.objective import make_scorer
from ones.predictor import PredictorFeatures, ProgressModel, beta_of
from ones.throughput import ThroughputModelParams

MAX_GPUS = 4
MAX_JOBS = 3
MAX_OPTIONS = 3


class InstanceTooLarge(ValueError):
    pass


@dataclass
class MicroInstance:
    cluster: ClusterSpec
    jobs: dict[int, JobRuntime]
    model: ProgressModel

    def throughput(self, job_id: int, batch: int, gpus: int, nodes: int) -> float:
        # independent closed form of the speed model
        p = self.jobs[job_id].spec.throughput
        local = batch / gpus
        if gpus == 1:
            return p.per_gpu_peak * local / (local + p.half_batch)
        cross = nodes - 1
        intra = gpus - nodes
        gamma_eff = p.comm_penalty * (intra * p.intra_node_discount + cross) / (gpus - 1)
        return gpus * p.per_gpu_peak * local / (local + p.half_batch) / (1 + gamma_eff * (gpus - 1))


def check_bounds(gpus: int, n_jobs: int, n_options: int) -> None:
    if gpus > MAX_GPUS or n_jobs > MAX_JOBS or n_options > MAX_OPTIONS:
        raise InstanceTooLarge(
            f"micro-instances are limited to {MAX_GPUS} GPUs, {MAX_JOBS} jobs and "
            f"{MAX_OPTIONS} batch options per job (got {gpus}, {n_jobs}, {n_options})")
    if gpus < 1 or n_jobs < 1 or n_options < 1:
        raise ValueError("need at least one GPU, job and batch option")


def random_instance(seed: int, gpus: int = 4, n_jobs: int = 3, n_options: int = 3) -> MicroInstance:
    """Started jobs with options ``{s, 2s, 4s}`` (first ``n_options``) and random speeds."""
    check_bounds(gpus, n_jobs, n_options)
    rng = np.random.default_rng(seed)
    cluster = ClusterSpec(1, gpus)
    jobs = {}
    for j in range(n_jobs):
        start = int(rng.choice([16, 32, 64]))
        options = tuple(start * 2 ** k for k in range(n_options))
        epoch = int(rng.integers(1000, 5000))
        spec = JobSpec(
            job_id=j, arrival_time=0.0, epoch_size=epoch,
            total_workload=epoch * 50, initial_batch_size=start, initial_learning_rate=0.1,
            max_local_batch=start, loss_init=2.3,
            throughput=ThroughputModelParams(float(rng.uniform(200, 2000)),
                                             float(rng.uniform(8, 96)),
                                             float(rng.uniform(0.02, 0.3))))
        rt = JobRuntime(spec)
        rt.start_time = 0.0
        rt.epochs_completed = int(rng.integers(1, 20))
        rt.processed = float(rt.epochs_completed * epoch)
        rt.current_loss = spec.loss_init * math.exp(-3.0 * rt.processed / spec.total_workload)
        rt.current_accuracy = 0.5
        rt.batch_limit = options[-1]
        rt.allowed_batches = options
        running = bool(rng.random() < 0.5)
        rt.status = JobStatus.RUNNING if running else JobStatus.WAITING
        if running:
            rt.global_batch = start
            rt.gpu_count = 1
        else:
            rt.previous_gpu_count = int(rng.integers(1, gpus + 1))
        jobs[j] = rt
    return MicroInstance(cluster, jobs, ProgressModel())


def _mean_progress(inst: MicroInstance, rt: JobRuntime) -> float:
    alpha = max(rt.processed / rt.spec.epoch_size, 1.0)
    if inst.model.is_cold:
        beta = max(inst.model.config.cold_beta, 1.0)
    else:
        beta = beta_of(inst.model, PredictorFeatures.of(rt))
    return alpha / (alpha + beta)


def _feasible(rt: JobRuntime, batch: int, gpus: int) -> bool:
    return (batch in rt.allowed_batches and gpus <= batch <= rt.batch_limit
            and -(-batch // gpus) <= rt.spec.max_local_batch)


def _configs(rt: JobRuntime, gpus: int) -> list[Optional[tuple[int, int]]]:
    out: list[Optional[tuple[int, int]]] = [None]
    for b in rt.allowed_batches:
        for c in range(1, gpus + 1):
            if _feasible(rt, b, c):
                out.append((b, c))
    return out


def _could_use(rt: JobRuntime, current: Optional[tuple[int, int]], idle: int) -> bool:
    """Whether the job could take at least one of ``idle`` GPUs with an allowed batch."""
    if idle <= 0:
        return False
    held = current[1] if current else 0
    for extra in range(1, idle + 1):
        c = held + extra
        for b in rt.allowed_batches:
            if current and b < current[0]:
                continue
            if _feasible(rt, b, c):
                return True
    return False


@dataclass(frozen=True)
class OracleResult:
    score: float
    allocation: dict[int, tuple[int, int]]
    evaluated: int


def optimum(inst: MicroInstance) -> OracleResult:
    """Minimum score over all saturated schedules (ties: first in enumeration order)."""
    gpus = inst.cluster.size
    ids = sorted(inst.jobs)
    rho = {j: _mean_progress(inst, inst.jobs[j]) for j in ids}
    best: Optional[OracleResult] = None
    count = 0
    for combo in itertools.product(*(_configs(inst.jobs[j], gpus) for j in ids)):
        used = sum(c for cfg in combo if cfg for _, c in [cfg])
        if used > gpus:
            continue
        idle = gpus - used
        if any(_could_use(inst.jobs[j], cfg, idle) for j, cfg in zip(ids, combo)):
            continue
        count += 1
        score = 0.0
        for j, cfg in zip(ids, combo):
            if cfg is None:
                continue
            b, c = cfg
            rt = inst.jobs[j]
            remaining = rt.processed * (1.0 / rho[j] - 1.0)
            score += remaining * c / inst.throughput(j, b, c, 1)
        if best is None or score < best.score:
            alloc = {j: cfg for j, cfg in zip(ids, combo) if cfg is not None}
            best = OracleResult(score, alloc, 0)
    if best is None:
        raise RuntimeError("no saturated schedule exists")
    return OracleResult(best.score, best.allocation, count)


@dataclass(frozen=True)
class EvolutionOutcome:
    score: float
    genome: Genome
    generations: int


def evolve(inst: MicroInstance, generations: int = 200, population: int = 4,
           mutation_rate: float = 0.2, seed: int = 0) -> EvolutionOutcome:
    """Run the search with progress frozen at the Beta means; return its best member."""
    config = EvolutionConfig(population_size=population, mutation_rate=mutation_rate,
                             generations_per_round=generations, rng_seed=seed, rho_mode="mean")
    rng = np.random.default_rng(seed)
    ctx = SearchContext(inst.cluster, inst.jobs, inst.throughput, inst.model)
    scorer = make_scorer(inst.jobs, inst.throughput, inst.model, None, 1, "mean")
    pop = init_population(inst.cluster, ctx, config, rng)
    for _ in range(generations):
        pop = evolve_round(pop, ctx, config, rng, scorer)
    best = min(pop.members, key=scorer)
    return EvolutionOutcome(scorer(best), best, pop.generation)


def scores_match(a: float, b: float, rel: float = 1e-9) -> bool:
    return math.isclose(a, b, rel_tol=rel, abs_tol=1e-12)
