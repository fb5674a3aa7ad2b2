import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ones.domain import Checkpoint, JobStatus
from ones.predictor import (BetaParams, PredictorConfig, PredictorFeatures, ProgressModel,
                            ProgressSample, alpha_of, beta_of, buffer_log_likelihood, fit,
                            predict, record_completion, remaining_time, remaining_workload,
                            sample_progress)

from conftest import make_runtime


def feats(processed=5000.0, epoch=1000.0, loss_init=2.0, r=0.3, acc=0.5):
    return PredictorFeatures(epoch, loss_init, processed, r, acc)


def test_alpha_examples():
    assert alpha_of(feats(5000, 1000)) == 5
    assert alpha_of(feats(0, 1000)) == 1
    assert alpha_of(feats(1000, 1000)) == 1


def test_beta_constant_models():
    assert beta_of(ProgressModel(weights=np.zeros(5), bias=-3.0), feats()) == 1.0
    assert beta_of(ProgressModel(weights=np.zeros(5), bias=7.5), feats()) == 7.5


def test_beta_matches_hand_affine():
    w = np.array([0.001, -0.5, 0.0001, 2.0, 1.5])
    m = ProgressModel(weights=w, bias=2.0)
    f = feats(4000, 1200, 2.5, 0.4, 0.7)
    hand = 0.001 * 1200 - 0.5 * 2.5 + 0.0001 * 4000 + 2.0 * 0.4 + 1.5 * 0.7 + 2.0
    assert beta_of(m, f) == pytest.approx(hand)


def test_predict_examples():
    assert predict(ProgressModel(weights=np.zeros(5), bias=1.0), feats(0)) == BetaParams(1, 1)
    assert BetaParams(5, 5).mean == 0.5
    cold = predict(ProgressModel(), feats(0))
    assert (cold.alpha, cold.beta) == (1.0, 4.0)


def test_sample_progress_seeded_and_moments():
    a = sample_progress(BetaParams(1, 1), np.random.default_rng(3))
    b = sample_progress(BetaParams(1, 1), np.random.default_rng(3))
    assert a == b and 0 < a < 1
    rng = np.random.default_rng(0)
    draws = [sample_progress(BetaParams(2, 2), rng) for _ in range(100_000)]
    assert abs(np.mean(draws) - 0.5) < 0.01
    draws = [sample_progress(BetaParams(5, 1), rng) for _ in range(100_000)]
    assert abs(np.mean(draws) - 5 / 6) < 0.01


def test_remaining_workload_and_time():
    assert remaining_workload(10000, 0.5) == 10000
    assert remaining_workload(10000, 0.25) == 30000
    assert remaining_workload(0, 0.3) == 0
    with pytest.raises(ValueError):
        remaining_workload(10, 1.0)
    assert remaining_time(30000, 500) == 60
    assert remaining_time(0, 10) == 0
    assert remaining_time(10000, 100) == 100
    with pytest.raises(ValueError):
        remaining_time(1, 0)


@given(st.floats(1, 1e7), st.floats(0.01, 0.98), st.floats(0.001, 0.01))
def test_remaining_workload_decreasing_in_rho(processed, rho, step):
    assert remaining_workload(processed, rho + step) < remaining_workload(processed, rho)


@given(st.floats(0, 1e7), st.floats(1, 1e6), st.floats(0, 1), st.floats(0, 1), st.floats(-50, 50))
def test_shapes_at_least_one(processed, epoch, r, acc, bias):
    f = PredictorFeatures(epoch, 2.0, processed, r, acc)
    m = ProgressModel(weights=np.array([0.1, -1, 1e-4, 3, -2]), bias=bias)
    assert alpha_of(f) >= 1 and beta_of(m, f) >= 1


@given(st.floats(1, 1e6), st.floats(0.01, 0.99), st.floats(1, 1e4), st.integers(1, 16))
def test_remaining_time_consistent_with_score_term(yp, rho, x, c):
    per_job = yp * c / x * (1 / rho - 1)
    assert remaining_time(remaining_workload(yp, rho), x) == pytest.approx(per_job / c)


def finished_job(n_checkpoints, total=100_000):
    rt = make_runtime(total=total, epoch=total // max(n_checkpoints + 1, 2))
    for i in range(n_checkpoints):
        p = (i + 1) * total / (n_checkpoints + 1)
        rt.checkpoints.append(Checkpoint(float(i), p, 0.5 * p / total, 0.4))
    rt.processed = float(total)
    rt.status = JobStatus.COMPLETED
    return rt


def test_record_completion_quota_and_eviction():
    m = ProgressModel(config=PredictorConfig(per_job_quota=10, buffer_cap=1000))
    rng = np.random.default_rng(0)
    assert record_completion(m, finished_job(100), rng) == 10
    assert len(m.buffer) == 10
    for _ in range(99):
        record_completion(m, finished_job(100), rng)
    assert len(m.buffer) == 1000
    first_new = finished_job(100, total=77_000)
    record_completion(m, first_new, rng)
    assert len(m.buffer) == 1000
    assert all(s.features.epoch_size == first_new.spec.epoch_size for s in list(m.buffer)[-10:])
    before = len(m.buffer)
    assert record_completion(m, finished_job(1), rng) == 0
    assert len(m.buffer) == before


def test_progress_sample_bounds():
    with pytest.raises(ValueError):
        ProgressSample(feats(), 1.0)


def test_fit_empty_is_noop():
    m = ProgressModel()
    assert fit(m) is m and m.is_cold and m.fits == 0


def test_fit_identical_points_stays_finite():
    m = ProgressModel()
    for _ in range(50):
        m.buffer.append(ProgressSample(feats(3000), 0.4))
    fit(m)
    assert m.last_fit_ok
    assert np.all(np.isfinite(m.weights)) and math.isfinite(m.bias)


def synthetic_buffer(seed, n=500):
    rng = np.random.default_rng(seed)
    a_true = np.array([0.0005, 0.5, -0.00002, 3.0, 2.0])
    b_true = 4.0
    m = ProgressModel()
    truth = []
    for _ in range(n):
        epoch = float(rng.integers(1000, 5000))
        f = PredictorFeatures(epoch, float(rng.uniform(1, 3)), float(rng.uniform(1, 20)) * epoch,
                              float(rng.uniform(0, 0.9)), float(rng.uniform(0, 1)))
        beta = max(float(a_true @ f.as_array()) + b_true, 1.0)
        rho = float(np.clip(rng.beta(alpha_of(f), beta), 1e-6, 1 - 1e-6))
        m.buffer.append(ProgressSample(f, rho))
        truth.append((f, beta))
    return m, truth


def test_fit_recovers_affine_beta():
    m, truth = synthetic_buffer(1)
    fit(m)
    err = np.median([abs(beta_of(m, f) - b) / b for f, b in truth])
    assert err <= 0.15


@given(st.integers(0, 10_000))
def test_fit_never_lowers_likelihood(seed):
    m, _ = synthetic_buffer(seed, n=60)
    before = buffer_log_likelihood(m)
    fit(m)
    assert buffer_log_likelihood(m) >= before - 1e-12
    # a second fit from the warm start cannot go down either
    before = buffer_log_likelihood(m)
    fit(m)
    assert buffer_log_likelihood(m) >= before - 1e-12


def test_dump_is_structured_text():
    m, _ = synthetic_buffer(0, n=20)
    fit(m)
    text = m.dumps()
    assert '"buffer_size": 20' in text and '"weights"' in text
