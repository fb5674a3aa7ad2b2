"""Online evolutionary search over schedules.

A population of genomes is kept across scheduling rounds.  Each generation
builds new candidates with four operators (refresh, uniform crossover,
uniform mutation, reorder), scores everything under one shared progress
draw and keeps the best ``K``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from ones.domain import ClusterSpec, Genome, JobRuntime, JobTable, Slot, split_batch
from ones.objective import Scorer, ThroughputFn, make_scorer, select_top_k
from ones.predictor import PredictorFeatures, ProgressModel, predict

GAIN_FLOOR = 1e-9


@dataclass
class EvolutionConfig:
    population_size: Optional[int] = None  # None -> number of GPUs
    mutation_rate: float = 0.2
    generations_per_round: int = 50
    rng_seed: int = 0
    rho_draws: int = 1
    rho_mode: str = "sample"  # "mean" freezes progress at the Beta means

    def __post_init__(self):
        if self.population_size is not None and self.population_size < 1:
            raise ValueError("population_size must be >= 1")
        if not 0.0 < self.mutation_rate < 1.0:
            raise ValueError("mutation_rate must lie in (0, 1)")
        if self.generations_per_round < 0:
            raise ValueError("generations_per_round must be >= 0")

    def k_for(self, cluster: ClusterSpec) -> int:
        return self.population_size or cluster.size


@dataclass
class Population:
    members: list[Genome]
    generation: int = 0


@dataclass(frozen=True)
class UtilizationGain:
    job_id: int
    delta: float
    weight: float


@dataclass
class _Target:
    job_id: int
    gpus: int
    batch: int


class SearchContext:
    """Immutable snapshot the operators read: jobs, speeds and Beta-mean estimates."""

    def __init__(self, cluster: ClusterSpec, jobs: JobTable, throughput_fn: ThroughputFn,
                 model: ProgressModel):
        self.cluster = cluster
        self.jobs = jobs
        self.throughput_fn = throughput_fn
        self.model = model
        self.live: dict[int, JobRuntime] = {
            j: jobs[j] for j in sorted(jobs) if not jobs[j].is_completed}
        self.remaining: dict[int, float] = {}
        for j, rt in self.live.items():
            mean = predict(model, PredictorFeatures.of(rt)).mean
            self.remaining[j] = rt.processed * (1.0 / mean - 1.0)
        self._contrib: dict[tuple, float] = {}

    def packed_nodes(self, gpus: int) -> int:
        return -(-gpus // self.cluster.gpus_per_node)

    def contribution(self, job_id: int, batch: int, gpus: int) -> float:
        """Expected remaining GPU-time of a job at (batch, gpus), Beta-mean progress."""
        if gpus <= 0:
            return 0.0
        key = (job_id, batch, gpus)
        value = self._contrib.get(key)
        if value is None:
            x = self.throughput_fn(job_id, batch, gpus, self.packed_nodes(gpus))
            value = self.remaining[job_id] * gpus / x
            self._contrib[key] = value
        return value

    def fit_batch(self, job_id: int, batch: int, gpus: int) -> Optional[int]:
        """Largest feasible global batch <= ``batch`` on ``gpus`` GPUs, or None."""
        rt = self.live[job_id]
        b = min(batch, rt.batch_limit, gpus * rt.spec.max_local_batch)
        if rt.allowed_batches is not None:
            options = [o for o in rt.allowed_batches if gpus <= o <= b]
            if not options:
                return None
            b = max(options)
        return b if b >= gpus else None


# -- slot-list helpers -------------------------------------------------------

def _positions(cells: Sequence[Slot]) -> dict[int, list[int]]:
    where: dict[int, list[int]] = {}
    for i, s in enumerate(cells):
        if s is not None:
            where.setdefault(s[0], []).append(i)
    return where


def _write(cells: list[Slot], job_id: int, indices: Sequence[int], batch: int) -> None:
    for i, local in zip(sorted(indices), split_batch(batch, len(indices))):
        cells[i] = (job_id, local)


def _clear(cells: list[Slot], indices: Iterable[int]) -> None:
    for i in indices:
        cells[i] = None


def _shrink_to_fit(cells: list[Slot], ctx: SearchContext, job_id: int,
                   indices: list[int], batch: int) -> None:
    """Re-split ``batch`` over ``indices``, dropping top slots until feasible."""
    indices = sorted(indices)
    while indices:
        fitted = ctx.fit_batch(job_id, batch, len(indices))
        if fitted is not None:
            _write(cells, job_id, indices, fitted)
            return
        cells[indices.pop()] = None
    return


def reorder(genome: Genome) -> Genome:
    """Pack each job's workers on consecutive GPUs, jobs by first occurrence, idle last."""
    groups: dict[int, list[int]] = {}
    for s in genome.slots:
        if s is not None:
            groups.setdefault(s[0], []).append(s[1])
    packed: list[Slot] = []
    for job_id, locals_ in groups.items():
        packed.extend((job_id, b) for b in locals_)
    packed.extend([None] * (len(genome.slots) - len(packed)))
    return Genome(genome.cluster, packed)


# -- fill loop ---------------------------------------------------------------

def _fill_targets(cells: Sequence[Slot], ctx: SearchContext,
                  exclude: set[int]) -> list[_Target]:
    where = _positions(cells)
    targets = []
    for job_id, rt in ctx.live.items():
        if job_id in exclude:
            continue
        ml = rt.spec.max_local_batch
        limit = rt.batch_limit
        if job_id not in where:
            prev = rt.gpu_count if rt.is_running else rt.previous_gpu_count
            gpus = max(1, min(max(prev, 1), -(-limit // ml)))
            batch = ctx.fit_batch(job_id, min(limit, gpus * ml), gpus)
            if batch is not None:
                targets.append(_Target(job_id, gpus, batch))
            continue
        idx = where[job_id]
        c = len(idx)
        current = sum(cells[i][1] for i in idx)
        if limit > current:
            gpus = limit * c // current
            if gpus > c:
                batch = min(limit, gpus * ml)
                targets.append(_Target(job_id, gpus, batch))
    return targets


def utilization_gains(cells: Sequence[Slot], ctx: SearchContext,
                      targets: Sequence[_Target]) -> list[UtilizationGain]:
    """Gain of moving each candidate to its target size, weighted by remaining work."""
    where = _positions(cells)
    gains = []
    for t in targets:
        idx = where.get(t.job_id, [])
        now = ctx.contribution(t.job_id, sum(cells[i][1] for i in idx), len(idx)) if idx else 0.0
        delta = now - ctx.contribution(t.job_id, t.batch, t.gpus)
        weight = max(delta * ctx.remaining[t.job_id], GAIN_FLOOR)
        gains.append(UtilizationGain(t.job_id, delta, weight))
    return gains


def _fill_idle(cells: list[Slot], ctx: SearchContext, rng: np.random.Generator,
               exclude: Iterable[int] = ()) -> None:
    """Keep granting idle GPUs to a sampled waiting or scalable job until none are idle."""
    blocked = set(exclude)
    fallback = bool(blocked)
    while True:
        idle = [i for i, s in enumerate(cells) if s is None]
        if not idle:
            return
        targets = _fill_targets(cells, ctx, blocked)
        if not targets:
            if fallback:
                # preempted jobs may refill only when nothing else can
                blocked = {j for j in blocked if j not in ctx.live}
                fallback = False
                continue
            return
        gains = utilization_gains(cells, ctx, targets)
        weights = np.array([g.weight for g in gains])
        pick = int(np.searchsorted(np.cumsum(weights), rng.random() * weights.sum(), side="right"))
        t = targets[min(pick, len(targets) - 1)]
        held = [i for i, s in enumerate(cells) if s is not None and s[0] == t.job_id]
        extra = min(t.gpus - len(held), len(idle))
        new_idx = held + idle[:extra]
        # capped grants keep the largest feasible batch up to the target
        batch = ctx.fit_batch(t.job_id, t.batch, len(new_idx))
        if batch is None or extra <= 0:
            blocked.add(t.job_id)
            continue
        _write(cells, t.job_id, new_idx, batch)


# -- operators ---------------------------------------------------------------

def refresh(genome: Genome, ctx: SearchContext, rng: np.random.Generator) -> Genome:
    """Bring a genome up to date with the live job table and fill idle GPUs."""
    cells = list(genome.slots)
    # (1) completed or unknown jobs release their GPUs
    for i, s in enumerate(cells):
        if s is not None and s[0] not in ctx.live:
            cells[i] = None
    # (2) shrink jobs whose limit dropped below their batch
    for job_id, idx in _positions(cells).items():
        limit = ctx.live[job_id].batch_limit
        batch = sum(cells[i][1] for i in idx)
        c = len(idx)
        if limit < batch:
            keep = limit * c // batch
            _clear(cells, idx[keep:])
            if keep:
                _shrink_to_fit(cells, ctx, job_id, idx[:keep], limit)
        else:
            fitted = ctx.fit_batch(job_id, batch, c)
            if fitted != batch or any(cells[i][1] > ctx.live[job_id].spec.max_local_batch for i in idx):
                _shrink_to_fit(cells, ctx, job_id, idx, batch)
    # (3) every new arrival gets one GPU, newest first
    where = _positions(cells)
    fresh = [rt for j, rt in ctx.live.items() if not rt.has_started and j not in where]
    fresh.sort(key=lambda rt: (-rt.spec.arrival_time, -rt.job_id))
    for rt in fresh:
        batch = ctx.fit_batch(rt.job_id, rt.batch_limit, 1)
        if batch is None:
            continue
        idle = [i for i, s in enumerate(cells) if s is None]
        if not idle:
            donors = [j for j, idx in _positions(cells).items() if ctx.live[j].has_started]
            if not donors:
                break
            donor = max(donors, key=lambda j: (ctx.live[j].executed_time, j))
            idx = [i for i, s in enumerate(cells) if s is not None and s[0] == donor]
            slot = idx.pop()
            kept = sum(cells[i][1] for i in idx)
            cells[slot] = None
            if idx:
                _shrink_to_fit(cells, ctx, donor, idx, kept)
            idle = [slot]
        cells[idle[0]] = (rt.job_id, batch)
    # (4) fill whatever is still idle
    _fill_idle(cells, ctx, rng)
    return reorder(Genome(genome.cluster, cells))


def crossover_slots(parent1: Genome, parent2: Genome,
                    swap: Sequence[bool]) -> tuple[list[Slot], list[Slot]]:
    """Route each GPU's content to one child; ``swap[i]`` sends parent1's to child 2."""
    c1, c2 = [], []
    for a, b, s in zip(parent1.slots, parent2.slots, swap):
        if s:
            c1.append(b)
            c2.append(a)
        else:
            c1.append(a)
            c2.append(b)
    return c1, c2


def _repair(cells: list[Slot], ctx: SearchContext) -> None:
    """Clip each job's global batch to its limit by dropping its highest slots."""
    for i, s in enumerate(cells):
        if s is not None and s[0] not in ctx.live:
            cells[i] = None
    for job_id, idx in _positions(cells).items():
        limit = ctx.live[job_id].batch_limit
        batch = sum(cells[i][1] for i in idx)
        while batch > limit and len(idx) > 1:
            batch -= cells[idx[-1]][1]
            cells[idx.pop()] = None
        _shrink_to_fit(cells, ctx, job_id, idx, min(batch, limit))


def uniform_crossover(parent1: Genome, parent2: Genome, rng: np.random.Generator,
                      ctx: Optional[SearchContext] = None) -> tuple[Genome, Genome]:
    """Fair-coin routing of every GPU slot; children are repaired, filled and reordered.

    Without a context the raw children are returned unrepaired.
    """
    if parent1.cluster != parent2.cluster:
        raise ValueError("parents must share a cluster")
    swap = rng.random(len(parent1.slots)) < 0.5
    c1, c2 = crossover_slots(parent1, parent2, swap)
    if ctx is None:
        return Genome(parent1.cluster, c1), Genome(parent1.cluster, c2)
    children = []
    for cells in (c1, c2):
        _repair(cells, ctx)
        _fill_idle(cells, ctx, rng)
        children.append(reorder(Genome(parent1.cluster, cells)))
    return children[0], children[1]


def choose_preempted(job_ids: Sequence[int], theta: float, rng: np.random.Generator) -> list[int]:
    draws = rng.random(len(job_ids))
    return [j for j, u in zip(job_ids, draws) if u < theta]


def uniform_mutation(genome: Genome, ctx: SearchContext, theta: float,
                     rng: np.random.Generator) -> Genome:
    """Preempt each present job with probability ``theta`` and refill the freed GPUs."""
    if not 0.0 < theta < 1.0:
        raise ValueError("mutation rate must lie in (0, 1)")
    cells = list(genome.slots)
    present = list(_positions(cells))
    preempted = choose_preempted(present, theta, rng)
    if preempted:
        gone = set(preempted)
        for i, s in enumerate(cells):
            if s is not None and s[0] in gone:
                cells[i] = None
    _repair(cells, ctx)
    _fill_idle(cells, ctx, rng, exclude=preempted)
    return reorder(Genome(genome.cluster, cells))


def init_population(cluster: ClusterSpec, ctx: SearchContext, config: EvolutionConfig,
                    rng: np.random.Generator) -> Population:
    """``K`` genomes that each run a uniformly random live job on every GPU."""
    k = config.k_for(cluster)
    live = list(ctx.live)
    members = []
    for _ in range(k):
        if not live:
            members.append(Genome.idle(cluster))
            continue
        picks = rng.integers(len(live), size=cluster.size)
        cells: list[Slot] = [None] * cluster.size
        groups: dict[int, list[int]] = {}
        for i, p in enumerate(picks):
            groups.setdefault(live[p], []).append(i)
        for job_id, idx in groups.items():
            rt = ctx.live[job_id]
            want = rt.spec.single_gpu_batch * len(idx)
            _shrink_to_fit(cells, ctx, job_id, idx, want)
        _fill_idle(cells, ctx, rng)
        members.append(reorder(Genome(cluster, cells)))
    return Population(members, 0)


def evolve_round(population: Population, ctx: SearchContext, config: EvolutionConfig,
                 rng: np.random.Generator, scorer: Optional[Scorer] = None) -> Population:
    """One generation: refresh + crossover children + mutants, keep the best ``K``."""
    members = population.members
    k = len(members)
    refreshed = [refresh(g, ctx, rng) for g in members]
    children: list[Genome] = []
    for _ in range(k):
        i, j = rng.integers(k, size=2)
        children.extend(uniform_crossover(refreshed[i], refreshed[j], rng, ctx))
    mutants = [uniform_mutation(refreshed[int(i)], ctx, config.mutation_rate, rng)
               for i in rng.integers(k, size=k)]
    pool = refreshed + children + mutants
    if scorer is None:
        scorer = make_scorer(ctx.jobs, ctx.throughput_fn, ctx.model, rng,
                             config.rho_draws, config.rho_mode)
    ranked = select_top_k(pool, len(pool), ctx.jobs, ctx.throughput_fn, ctx.model, rng,
                          scorer=scorer)
    # keep distinct genomes first so the population does not collapse onto one point
    seen: set[Genome] = set()
    chosen = []
    for g in ranked:
        if g not in seen:
            seen.add(g)
            chosen.append(g)
            if len(chosen) == k:
                break
    i = 0
    while len(chosen) < k:
        chosen.append(ranked[i])
        i += 1
    return Population(chosen, population.generation + 1)


def should_update(jobs: JobTable, last_update_epochs: Optional[dict[int, int]] = None) -> bool:
    """True once every running job finished an epoch since the last deployment.

    ``last_update_epochs`` maps job id to its epoch counter at deployment; when
    omitted each job's ``epochs_since_deploy`` is used.  With nothing running
    it is true iff some job is waiting to start.
    """
    running = [rt for rt in jobs.values() if rt.is_running]
    if not running:
        return any(rt.is_waiting for rt in jobs.values())
    for rt in running:
        if last_update_epochs is not None:
            done = rt.epochs_completed - last_update_epochs.get(rt.job_id, rt.epochs_completed)
        else:
            done = rt.epochs_since_deploy
        if done < 1:
            return False
    return True
