"""The evolutionary batch-size scheduler as a simulator policy."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from ones.domain import Genome
from ones.evolution import (EvolutionConfig, Population, SearchContext, evolve_round,
                            init_population, refresh, should_update)
from ones.objective import make_scorer, probability_sample_best
from ones.predictor import PredictorConfig, ProgressModel, fit, record_completion
from ones.scaling import ArrivalRateEstimator, PolicyConfig, on_arrival, on_epoch
from ones.simulator import BasePolicy, Decision, EventKind


QUICK_TRIGGERS = {EventKind.JOB_ARRIVAL, EventKind.JOB_COMPLETE, EventKind.EPOCH_COMPLETE}


@dataclass
class RoundLog:
    time: float
    generation: int
    best_score: float
    distinct: int


class OnesPolicy(BasePolicy):
    """Keeps a population alive across rounds and deploys its sampled best member."""

    name = "ones"
    overhead_kind = "elastic"

    def __init__(self, evolution: Optional[EvolutionConfig] = None,
                 policy: Optional[PolicyConfig] = None,
                 predictor: Optional[PredictorConfig] = None, seed: int = 0,
                 keep_log: bool = False, quick_response: bool = True):
        super().__init__()
        self.evolution = evolution or EvolutionConfig()
        self.policy_config = policy or PolicyConfig()
        self.model = ProgressModel(config=predictor or PredictorConfig())
        self.rng = np.random.default_rng([seed, self.evolution.rng_seed])
        self.arrivals = ArrivalRateEstimator()
        self.population: Optional[Population] = None
        self.keep_log = keep_log
        self.quick_response = quick_response
        self.log: list[RoundLog] = []

    def on_arrival(self, sim, rt):
        self.arrivals.observe(rt.spec.arrival_time)
        self.policy_config.lambda_estimate = self.arrivals.rate
        on_arrival(rt, self.policy_config)

    def on_epoch(self, sim, rt):
        on_epoch(rt, self.policy_config, sim.cluster.size)

    def on_complete(self, sim, rt):
        if record_completion(self.model, rt, self.rng):
            fit(self.model)

    def decide(self, sim, triggers: set[EventKind]) -> Union[Genome, Decision, None]:
        live = sim.live_jobs()
        if not live:
            return None
        if not should_update(live):
            if self.quick_response and triggers & QUICK_TRIGGERS:
                return self._refresh_deployed(sim)
            return None
        ctx = SearchContext(sim.cluster, sim.jobs, sim.throughput, self.model)
        cfg = self.evolution
        if self.population is None or len(self.population.members) != cfg.k_for(sim.cluster):
            self.population = init_population(sim.cluster, ctx, cfg, self.rng)
        if cfg.generations_per_round == 0:
            self.population = Population([refresh(g, ctx, self.rng)
                                          for g in self.population.members],
                                         self.population.generation)
        for _ in range(cfg.generations_per_round):
            self.population = evolve_round(self.population, ctx, cfg, self.rng)
        best = probability_sample_best(self.population.members, sim.jobs, sim.throughput,
                                       self.model, self.rng, cfg.rho_draws, cfg.rho_mode)
        if self.keep_log:
            scorer = make_scorer(sim.jobs, sim.throughput, self.model, None, 1, "mean")
            self.log.append(RoundLog(sim.now, self.population.generation, scorer(best),
                                     len(set(self.population.members))))
        return best

    def _refresh_deployed(self, sim) -> Optional[Decision]:
        """Between full updates: place arrivals and backfill freed GPUs on the live schedule.

        Only the refresh operator is applied, so jobs keep their allocation
        unless they must give a GPU to a new arrival or can grow into idle GPUs.
        """
        ctx = SearchContext(sim.cluster, sim.jobs, sim.throughput, self.model)
        genome = refresh(sim.genome, ctx, self.rng)
        return None if genome == sim.genome else Decision(genome, partial=True)
