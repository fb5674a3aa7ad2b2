import math

import pytest
from hypothesis import given, strategies as st

from ones.domain import ClusterSpec, Genome, JobStatus
from ones.scaling import (ArrivalRateEstimator, PolicyConfig, ScalingReason, apply_policies,
                          limit_on_epoch, limit_on_resume_rejected, limit_on_scale_down,
                          limit_on_start, on_arrival, on_epoch, scaled_learning_rate)

from conftest import make_runtime, make_spec


def test_limit_on_start():
    assert limit_on_start(make_spec(batch=256, max_local=512)) == 256
    assert limit_on_start(make_spec(batch=1024, max_local=512)) == 512


def test_limit_on_resume_rejected():
    assert limit_on_resume_rejected(512) == 256
    assert limit_on_resume_rejected(1) == 1
    assert limit_on_resume_rejected(limit_on_resume_rejected(512)) == 128
    assert limit_on_resume_rejected(64, floor=64) == 64


def test_limit_on_epoch():
    assert limit_on_epoch(256, 4096) == 512
    assert limit_on_epoch(1024, 1024) == 1024
    r = 128
    for _ in range(3):
        r = limit_on_epoch(r, 1024)
    assert r == 1024


def test_limit_on_scale_down():
    assert limit_on_scale_down(1024, 1500.0, 0.002) == 512
    assert limit_on_scale_down(300, 400.0, 0.002) == 300
    assert limit_on_scale_down(1024, 1e12, 0.002) == 1


@given(st.integers(1, 1 << 16), st.floats(0, 1e6), st.floats(0, 1e6),
       st.floats(1e-6, 1.0))
def test_scale_down_non_increasing_in_time(r, t1, t2, sigma):
    lo, hi = sorted((t1, t2))
    assert limit_on_scale_down(r, hi, sigma) <= limit_on_scale_down(r, lo, sigma)


def test_scaled_learning_rate():
    assert scaled_learning_rate(0.1, 256, 1024) == pytest.approx(0.4)
    assert scaled_learning_rate(0.1, 256, 256) == 0.1
    assert scaled_learning_rate(0.1, 256, 128) == pytest.approx(0.05)
    with pytest.raises(ValueError):
        scaled_learning_rate(0.1, 0, 64)


@given(st.floats(1e-5, 10), st.integers(1, 4096), st.integers(1, 4096), st.integers(1, 4096))
def test_learning_rate_is_multiplicative(lr0, b0, b1, b2):
    via = scaled_learning_rate(scaled_learning_rate(lr0, b0, b1), b1, b2)
    assert math.isclose(via, scaled_learning_rate(lr0, b0, b2), rel_tol=1e-12)


def test_config_validation():
    with pytest.raises(ValueError):
        PolicyConfig(sigma=0.0)
    with pytest.raises(ValueError):
        PolicyConfig(warmup_epochs=-1)
    cfg = PolicyConfig()
    cfg.lambda_estimate = 0.01
    assert cfg.current_sigma() == 0.01
    assert PolicyConfig(sigma=0.5).current_sigma() == 0.5


def test_arrival_rate_estimator():
    est = ArrivalRateEstimator()
    assert est.rate == 0.0
    for k in range(50):
        est.observe(10.0 * k)
    assert est.rate == pytest.approx(0.1)


def test_on_arrival_and_epoch():
    cfg = PolicyConfig(sigma=1e-9)
    rt = make_runtime(init_batch=128, max_local=64, running=True, batch=64, gpus=1)
    on_arrival(rt, cfg)
    assert rt.batch_limit == 64
    on_epoch(rt, cfg, cluster_gpus=8)
    assert rt.batch_limit == 64  # still warming up
    rt.epochs_completed = 1
    on_epoch(rt, cfg, cluster_gpus=8)
    assert rt.batch_limit == 128
    on_epoch(rt, cfg, cluster_gpus=8)
    assert rt.batch_limit == 128  # at most twice the running batch
    rt.global_batch = 256
    on_epoch(rt, cfg, cluster_gpus=4)
    assert rt.batch_limit == 256  # cluster cap 4 x 64


def test_on_epoch_penalty_after_doubling():
    cfg = PolicyConfig(sigma=0.002)
    rt = make_runtime(init_batch=64, max_local=1024, running=True, batch=1024, gpus=2)
    rt.batch_limit = 512
    rt.epochs_completed = 3
    rt.executed_time = 1500.0
    on_epoch(rt, cfg, cluster_gpus=8)
    assert rt.batch_limit == 512  # doubled to 1024, then ceil(2 * 1024 / 4)


def test_apply_policies_examples():
    cluster = ClusterSpec(1, 2)
    cfg = PolicyConfig(sigma=0.001)
    waiting = make_runtime(1, limit=512, init_batch=64, started=True)
    up = make_runtime(2, limit=256, running=True, batch=128, gpus=1, max_local=128)
    up.current_learning_rate = 0.2
    same = make_runtime(3, limit=64, running=True, batch=64, gpus=1)
    jobs = {1: waiting, 2: up, 3: same}
    genome = Genome(cluster, [(2, 128), (2, 128)])
    steps = apply_policies(jobs, genome, 5.0, cfg)
    assert waiting.batch_limit == 256
    assert [s.job_id for s in steps] == [2]
    step = steps[0]
    assert step.reason is ScalingReason.SCALE_UP
    assert (step.old_batch, step.new_batch) == (128, 256)
    assert step.new_lr == pytest.approx(step.old_lr * 2)
    assert up.global_batch == 256 and up.gpu_count == 2
    assert same.global_batch == 0 and same.previous_gpu_count == 1

    jobs[3].status = JobStatus.RUNNING
    jobs[3].global_batch, jobs[3].gpu_count = 64, 1
    steps = apply_policies({3: jobs[3]}, Genome(cluster, [(3, 64), None]), 6.0, cfg)
    assert steps == []


def test_apply_policies_reasons():
    cluster = ClusterSpec(1, 1)
    cfg = PolicyConfig()
    fresh = make_runtime(1)
    steps = apply_policies({1: fresh}, Genome(cluster, [(1, 64)]), 0.0, cfg)
    assert steps[0].reason is ScalingReason.START
    paused = make_runtime(2, started=True)
    steps = apply_policies({2: paused}, Genome(cluster, [(2, 32)]), 0.0, cfg)
    assert steps[0].reason is ScalingReason.DEPLOY
    assert steps[0].new_lr == pytest.approx(0.05)
    shrink = make_runtime(3, running=True, batch=64, gpus=1)
    steps = apply_policies({3: shrink}, Genome(cluster, [(3, 32)]), 0.0, cfg)
    assert steps[0].reason is ScalingReason.SCALE_DOWN
    assert steps[0].as_row()[2] == "scale_down"
