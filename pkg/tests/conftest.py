import pytest
from hypothesis import HealthCheck, settings

from ones.domain import ClusterSpec, JobRuntime, JobSpec, JobStatus
from ones.throughput import ThroughputModelParams

settings.register_profile("default", deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

PARAMS = ThroughputModelParams(per_gpu_peak=1000.0, half_batch=32.0, comm_penalty=0.1)


def make_spec(job_id=0, arrival=0.0, epoch=1000, total=20000, batch=64, max_local=64,
              lr=0.1, params=PARAMS, **kw):
    return JobSpec(job_id=job_id, arrival_time=arrival, epoch_size=epoch, total_workload=total,
                   initial_batch_size=batch, initial_learning_rate=lr,
                   max_local_batch=max_local, loss_init=kw.pop("loss_init", 2.0),
                   throughput=params, **kw)


def make_runtime(job_id=0, limit=None, running=False, batch=0, gpus=0, processed=0.0,
                 started=None, **kw):
    spec = make_spec(job_id=job_id, batch=kw.pop("init_batch", 64), **kw)
    rt = JobRuntime(spec)
    rt.batch_limit = limit if limit is not None else spec.initial_batch_size
    rt.processed = processed
    if running:
        rt.status = JobStatus.RUNNING
        rt.global_batch = batch
        rt.gpu_count = gpus
        rt.start_time = 0.0
    elif started:
        rt.start_time = 0.0
    return rt


@pytest.fixture
def cluster4():
    return ClusterSpec(1, 4)


def random_jobs(rng, n_jobs):
    """A random job table mixing new, running, paused and completed jobs."""
    jobs = {}
    for j in range(n_jobs):
        start = int(rng.choice([8, 16, 32, 64, 128]))
        max_local = start * int(rng.choice([1, 2, 4]))
        rt = make_runtime(job_id=j, arrival=float(j), init_batch=start, max_local=max_local,
                          epoch=int(rng.integers(100, 5000)), total=100_000,
                          params=ThroughputModelParams(float(rng.uniform(100, 2000)),
                                                       float(rng.uniform(4, 128)),
                                                       float(rng.uniform(0.01, 0.4))))
        rt.batch_limit = int(start * 2 ** rng.integers(0, 5))
        state = rng.integers(4)
        if state >= 1:
            rt.start_time = 0.0
            rt.processed = float(rng.uniform(1, 90_000))
            rt.executed_time = float(rng.uniform(1, 5000))
            rt.epochs_completed = int(rng.integers(1, 30))
        if state == 1:
            rt.status = JobStatus.RUNNING
            rt.gpu_count = 1
            rt.global_batch = min(start, rt.batch_limit)
        elif state == 2:
            rt.previous_gpu_count = int(rng.integers(1, 5))
        elif state == 3 and rng.random() < 0.5:
            rt.status = JobStatus.COMPLETED
        jobs[j] = rt
    return jobs


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
