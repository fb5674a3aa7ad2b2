import pytest
from hypothesis import given, settings, strategies as st

from ones.baselines import (BaselineConfig, FifoFixed, LasTiresias, SrptGreedy, las_queue,
                            make_baseline, place, remaining_work_proxy)
from ones.domain import ClusterSpec, Genome, gpu_count_of, validate
from ones.simulator import EventKind, Simulator, simulate
from ones.throughput import job_throughput
from ones.traces import generate

from conftest import PARAMS, make_runtime, make_spec

ARRIVAL = {EventKind.JOB_ARRIVAL}


def sim_with(specs, cluster, policy):
    sim = Simulator(specs, cluster, policy)
    for s in specs:
        sim._arrive(s)
    return sim


def test_config_validation():
    with pytest.raises(ValueError):
        BaselineConfig(kind="drl")
    with pytest.raises(ValueError):
        BaselineConfig(reschedule_interval=0)
    with pytest.raises(ValueError):
        BaselineConfig(queue_thresholds=(10.0, 5.0))
    with pytest.raises(ValueError):
        make_baseline("nope")


def test_place_keeps_current_slots():
    cluster = ClusterSpec(1, 4)
    current = Genome(cluster, [None, None, (7, 64), None])
    out = place(cluster, current, {7: (64, 1), 8: (128, 2)})
    assert out.slots == ((8, 64), (8, 64), (7, 64), None)
    with pytest.raises(ValueError):
        place(cluster, current, {7: (64, 5)})


def test_fifo_places_on_lowest_slots():
    cluster = ClusterSpec(1, 4)
    sim = sim_with([make_spec(0, batch=128, max_local=64)], cluster, FifoFixed())
    out = sim.scheduler.decide(sim, ARRIVAL)
    assert out.slots == ((0, 64), (0, 64), None, None)


def test_fifo_head_blocks():
    cluster = ClusterSpec(1, 4)
    big = make_spec(0, batch=512, max_local=64)  # wants 8 GPUs
    small = make_spec(1, arrival=1.0)
    sim = sim_with([big, small], cluster, FifoFixed())
    assert sim.scheduler.decide(sim, ARRIVAL) is None


def test_fifo_empty_queue():
    sim = Simulator([], ClusterSpec(1, 4), FifoFixed())
    assert sim.scheduler.decide(sim, ARRIVAL) is None
    assert sim.genome == Genome.idle(sim.cluster)


def test_fifo_never_resizes_running_jobs():
    res = simulate(generate(30, 0.05, 2).jobs, ClusterSpec(1, 4), FifoFixed())
    for rec, rt in zip(res.records, res.jobs.values()):
        assert rt.reconfigurations == 0
        assert rec.preemptions == 0
        assert rec.final_batch == rt.spec.initial_batch_size


def test_las_queue_lookup():
    assert las_queue(0.0, (1e3, 1e4, 1e5)) == 0
    assert las_queue(2 * 300.0, (1e3, 1e4, 1e5)) == 0
    assert las_queue(600.0, (500.0, 1e4)) == 1
    assert las_queue(1e6, (1e3, 1e4, 1e5)) == 3


def test_las_new_arrival_preempts_long_runner():
    cluster = ClusterSpec(1, 1)
    old = make_spec(0)
    new = make_spec(1, arrival=10.0)
    policy = LasTiresias(BaselineConfig("las", queue_thresholds=(100.0,)))
    sim = sim_with([old, new], cluster, policy)
    sim.deploy(Genome(cluster, [(0, 64)]))
    sim.jobs[0].attained_service = 500.0
    out = policy.decide(sim, ARRIVAL)
    assert out.slots == ((1, 64),)


def test_las_fifo_within_queue():
    cluster = ClusterSpec(1, 1)
    policy = LasTiresias()
    sim = sim_with([make_spec(0), make_spec(1, arrival=1.0)], cluster, policy)
    assert policy.decide(sim, ARRIVAL).slots == ((0, 64),)


def test_remaining_work_proxy():
    rt = make_runtime(epoch=1000)
    assert remaining_work_proxy(rt) == 10_000
    rt.epochs_completed = 2
    rt.processed = 2000.0
    rt.current_loss = 1.0  # loss_init 2.0
    assert remaining_work_proxy(rt) == pytest.approx(2000.0)
    rt.current_loss = 0.01
    assert remaining_work_proxy(rt) == 1000.0


def test_srpt_single_job_stops_at_knee():
    cluster = ClusterSpec(1, 4)
    spec = make_spec(0, batch=64, max_local=64)
    policy = SrptGreedy()
    sim = sim_with([spec], cluster, policy)
    counts = policy.allocation_counts(sim)
    rates = [job_throughput(PARAMS, 64, c, 1) for c in range(1, 5)]
    knee = 1 + next((i for i in range(3) if rates[i + 1] <= rates[i]), 3)
    assert counts == {0: knee}


def test_srpt_symmetric_split():
    cluster = ClusterSpec(1, 4)
    policy = SrptGreedy()
    p = PARAMS.__class__(1000.0, 32.0, 0.01)
    sim = sim_with([make_spec(0, params=p), make_spec(1, params=p)], cluster, policy)
    assert policy.allocation_counts(sim) == {0: 2, 1: 2}


def test_srpt_cadence():
    trace = generate(15, 0.01, 4).jobs
    res = simulate(trace, ClusterSpec(1, 4), SrptGreedy(BaselineConfig("srpt", 600.0)))
    arrivals = {s.arrival_time for s in trace}
    for dep in res.deployments:
        on_tick = abs(dep.time / 600.0 - round(dep.time / 600.0)) < 1e-9
        assert on_tick or dep.time in arrivals


@settings(max_examples=10)
@given(st.sampled_from(["fifo", "las", "srpt"]), st.integers(0, 1000))
def test_baselines_emit_valid_genomes(kind, seed):
    sim = Simulator(generate(15, 0.05, seed).jobs, ClusterSpec(2, 2), make_baseline(kind))
    seen = []
    original = sim.deploy

    def spy(genome, partial=False):
        seen.append(validate(genome, sim.jobs))
        return original(genome, partial)

    sim.deploy = spy
    res = sim.run()
    assert seen and all(v is None for v in seen)
    assert all(gpu_count_of(sim.genome, j) == 0 for j in res.jobs)
