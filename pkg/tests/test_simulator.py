import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ones.baselines import FifoFixed, make_baseline
from ones.domain import ClusterSpec, Genome
from ones.evolution import EvolutionConfig
from ones.scheduler import OnesPolicy
from ones.simulator import (BasePolicy, OverheadModelParams, Simulator, accuracy_from_loss,
                            simulate)
from ones.throughput import job_throughput
from ones.traces import generate

from conftest import PARAMS, make_spec


def test_single_job_closed_form():
    spec = make_spec(total=20_000, batch=64, max_local=64)
    res = simulate([spec], ClusterSpec(1, 1), FifoFixed())
    rec = res.records[0]
    expected = 20_000 / job_throughput(PARAMS, 64, 1, 1)
    assert rec.queuing == 0.0
    assert rec.execution == pytest.approx(expected, rel=1e-9)
    assert rec.jct == pytest.approx(rec.queuing + rec.execution)


def test_single_job_with_overhead():
    # a job that arrives into a running cluster has no overhead charged at first start
    spec = make_spec(arrival=5.0, total=5_000)
    res = simulate([spec], ClusterSpec(1, 1), FifoFixed())
    assert res.records[0].finish == pytest.approx(5.0 + 5_000 / job_throughput(PARAMS, 64, 1, 1))
    assert res.reconfigurations == 0


def test_fifo_two_jobs_one_gpu_serial():
    a = make_spec(0, total=10_000)
    b = make_spec(1, total=10_000)
    res = simulate([a, b], ClusterSpec(1, 1), FifoFixed())
    first, second = res.records
    assert first.queuing == 0.0
    assert second.queuing == pytest.approx(first.execution, rel=1e-9)


def test_trace_validation():
    a = make_spec(0, arrival=5.0)
    b = make_spec(1, arrival=1.0)
    with pytest.raises(ValueError):
        Simulator([a, b], ClusterSpec(1, 1), FifoFixed())
    with pytest.raises(ValueError):
        Simulator([make_spec(0), make_spec(0)], ClusterSpec(1, 1), FifoFixed())


def test_overhead_params():
    with pytest.raises(ValueError):
        OverheadModelParams(elastic_scale_seconds=30.0)
    with pytest.raises(ValueError):
        OverheadModelParams(mode="bogus")
    assert OverheadModelParams().seconds("elastic") == 1.0


def test_accuracy_mapping_is_increasing():
    spec = make_spec()
    accs = [accuracy_from_loss(spec, spec.loss_init * f) for f in (1.0, 0.5, 0.1)]
    assert accs == sorted(accs)


def small_trace(seed, n=12):
    return generate(n, 0.02, seed).jobs


def run(kind, seed, n=12, cluster=ClusterSpec(1, 4), **kw):
    if kind == "ones":
        sched = OnesPolicy(EvolutionConfig(generations_per_round=2), seed=seed)
    else:
        sched = make_baseline(kind)
    return simulate(small_trace(seed, n), cluster, sched, seed=seed, **kw)


@pytest.mark.parametrize("kind", ["ones", "fifo", "las", "srpt"])
def test_determinism(kind):
    a, b = run(kind, 3), run(kind, 3)
    assert a.records == b.records
    assert a.steps == b.steps


@pytest.mark.parametrize("kind", ["ones", "fifo", "las", "srpt"])
def test_conservation_and_busy_bound(kind):
    res = run(kind, 5)
    for rt in res.jobs.values():
        assert math.isclose(rt.work_integral, rt.spec.total_workload, rel_tol=1e-6)
    assert res.busy_gpu_seconds <= 4 * res.makespan * (1 + 1e-12)
    for r in res.records:
        assert r.jct == pytest.approx(r.queuing + r.execution)
        assert r.queuing >= 0 and r.execution > 0


@settings(max_examples=8)
@given(st.integers(0, 1000))
def test_checkpoint_never_faster_per_job(seed):
    trace = small_trace(seed, 8)
    cluster = ClusterSpec(1, 4)
    runs = {}
    for cost in (1.0, 20.0):
        overhead = OverheadModelParams(1.0, cost, mode="account")
        sched = OnesPolicy(EvolutionConfig(generations_per_round=1), seed=seed)
        runs[cost] = simulate(trace, cluster, sched, overhead, seed, overhead_kind="checkpoint")
    for fast, slow in zip(runs[1.0].records, runs[20.0].records):
        assert slow.execution >= fast.execution


def test_stall_mode_delays_progress():
    spec = make_spec(total=10_000)

    class Resize(BasePolicy):
        overhead_kind = "elastic"
        done = False

        def decide(self, sim, triggers):
            if not sim.genome.jobs():
                return Genome(sim.cluster, [(0, 64), None])
            if not self.done:
                self.done = True
                return Genome(sim.cluster, [(0, 32), (0, 32)])
            return None

    res = simulate([spec], ClusterSpec(1, 2), Resize())
    assert res.reconfigurations == 1
    rate1, rate2 = job_throughput(PARAMS, 64, 1, 1), job_throughput(PARAMS, 64, 2, 1)
    # one epoch on one GPU, a one-second pause, then the rest on two GPUs
    assert res.records[0].finish == pytest.approx(1_000 / rate1 + 1.0 + 9_000 / rate2)


def test_deploy_rejects_bad_genomes():
    sim = Simulator([make_spec(0)], ClusterSpec(1, 2), FifoFixed())
    with pytest.raises(RuntimeError):
        sim.deploy(Genome(sim.cluster, [(0, 64), None]))  # job has not arrived
    with pytest.raises(ValueError):
        sim.deploy(Genome.idle(ClusterSpec(1, 4)))


def test_batch_never_exceeds_limit_and_growth_bounded():
    res = run("ones", 11, n=20)
    for dep in res.deployments:
        for ch in dep.changes:
            assert ch.new_batch <= ch.limit
            if ch.previous_batch > 0:
                assert ch.new_batch <= 2 * ch.previous_batch
