"""Scoring candidate schedules by expected remaining GPU utilisation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from ones.domain import Genome, JobTable
from ones.predictor import PredictorFeatures, ProgressModel, predict, sample_progress

# (job_id, global_batch, gpu_count, node_count) -> samples/s
ThroughputFn = Callable[[int, int, int, int], float]


@dataclass(frozen=True)
class CandidateScore:
    candidate_index: int
    score: float


def draw_rhos(jobs: JobTable, model: ProgressModel, rng: Optional[np.random.Generator],
              mode: str = "sample") -> dict[int, float]:
    """One progress value per live job, in job-id order.

    ``mode="sample"`` draws from each job's Beta distribution;
    ``mode="mean"`` uses the distribution means (no randomness consumed).
    """
    rhos = {}
    for job_id in sorted(jobs):
        rt = jobs[job_id]
        if rt.is_completed:
            continue
        params = predict(model, PredictorFeatures.of(rt))
        if mode == "mean":
            rhos[job_id] = params.mean
        elif mode == "sample":
            rhos[job_id] = sample_progress(params, rng)
        else:
            raise ValueError(f"unknown rho mode {mode!r}")
    return rhos


def utilization_score(genome: Genome, jobs: JobTable, throughput_fn: ThroughputFn,
                      rho_samples: Mapping[int, float]) -> float:
    """Sum over the jobs running in ``genome`` of ``Yp * c / X * (1/rho - 1)``."""
    total = 0.0
    for job_id, alloc in genome.allocation().items():
        try:
            rho = rho_samples[job_id]
        except KeyError:
            raise ValueError(f"no progress sample for running job {job_id}") from None
        x = throughput_fn(job_id, alloc.global_batch, alloc.gpu_count, alloc.node_count)
        total += jobs[job_id].processed * alloc.gpu_count / x * (1.0 / rho - 1.0)
    return total


class Scorer:
    """Scores genomes under fixed progress draws, caching per-job terms.

    With several draws the score is the average over draws.
    """

    def __init__(self, jobs: JobTable, throughput_fn: ThroughputFn,
                 rho_draws: Sequence[Mapping[int, float]]):
        if not rho_draws:
            raise ValueError("need at least one progress draw")
        self.jobs = jobs
        self.throughput_fn = throughput_fn
        self.rho_draws = list(rho_draws)
        factor: dict[int, float] = {}
        for job_id, rt in jobs.items():
            if rt.is_completed:
                continue
            acc = 0.0
            for draw in self.rho_draws:
                if job_id not in draw:
                    break
                acc += 1.0 / draw[job_id] - 1.0
            else:
                factor[job_id] = rt.processed * acc / len(self.rho_draws)
        self._factor = factor
        self._terms: dict[tuple, float] = {}
        self._cache: dict[Genome, float] = {}

    def term(self, job_id: int, batch: int, gpus: int, nodes: int) -> float:
        key = (job_id, batch, gpus, nodes)
        value = self._terms.get(key)
        if value is None:
            try:
                factor = self._factor[job_id]
            except KeyError:
                raise ValueError(f"no progress sample for running job {job_id}") from None
            value = factor * gpus / self.throughput_fn(job_id, batch, gpus, nodes)
            self._terms[key] = value
        return value

    def __call__(self, genome: Genome) -> float:
        value = self._cache.get(genome)
        if value is None:
            value = 0.0
            for job_id, a in genome.allocation().items():
                value += self.term(job_id, a.global_batch, a.gpu_count, a.node_count)
            self._cache[genome] = value
        return value


def make_scorer(jobs: JobTable, throughput_fn: ThroughputFn, model: ProgressModel,
                rng: Optional[np.random.Generator], rho_draws: int = 1,
                rho_mode: str = "sample") -> Scorer:
    draws = [draw_rhos(jobs, model, rng, rho_mode) for _ in range(max(1, rho_draws))]
    return Scorer(jobs, throughput_fn, draws)


def score_candidates(candidates: Sequence[Genome], scorer: Scorer) -> list[CandidateScore]:
    return [CandidateScore(i, scorer(g)) for i, g in enumerate(candidates)]


def probability_sample_best(candidates: Sequence[Genome], jobs: JobTable,
                            throughput_fn: ThroughputFn, model: ProgressModel,
                            rng: Optional[np.random.Generator], rho_draws: int = 1,
                            rho_mode: str = "sample", scorer: Optional[Scorer] = None) -> Genome:
    """Draw one progress value per job, score every candidate, return the minimum.

    Ties go to the lowest candidate index.
    """
    if not candidates:
        raise ValueError("probability sampling needs at least one candidate")
    if scorer is None:
        scorer = make_scorer(jobs, throughput_fn, model, rng, rho_draws, rho_mode)
    best = min(score_candidates(candidates, scorer), key=lambda c: (c.score, c.candidate_index))
    return candidates[best.candidate_index]


def select_top_k(candidates: Sequence[Genome], k: int, jobs: JobTable,
                 throughput_fn: ThroughputFn, model: ProgressModel,
                 rng: Optional[np.random.Generator], rho_draws: int = 1,
                 rho_mode: str = "sample", scorer: Optional[Scorer] = None) -> list[Genome]:
    """The ``k`` lowest-scoring candidates under one shared draw, by (score, index)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if scorer is None:
        scorer = make_scorer(jobs, throughput_fn, model, rng, rho_draws, rho_mode)
    ranked = sorted(score_candidates(candidates, scorer), key=lambda c: (c.score, c.candidate_index))
    return [candidates[c.candidate_index] for c in ranked[:k]]
