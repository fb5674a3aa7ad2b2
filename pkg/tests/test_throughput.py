import math

import pytest
from hypothesis import given, strategies as st

from ones.throughput import (ThroughputModelParams, effective_penalty, job_throughput,
                             throughput)

P = ThroughputModelParams(per_gpu_peak=800.0, half_batch=64.0, comm_penalty=0.15)


def test_single_worker_has_no_communication_term():
    assert throughput(P, 128, 1) == pytest.approx(800.0 * 128 / (128 + 64))


def test_closed_form_multi_node():
    # 4 workers over 2 nodes: 1 cross-node join, 2 intra-node joins
    gamma_eff = 0.15 * (2 * 0.5 + 1) / 3
    expected = 4 * 800.0 * 32 / (32 + 64) / (1 + gamma_eff * 3)
    assert throughput(P, 32, 4, 2) == pytest.approx(expected)
    assert effective_penalty(P, 4, 2) == pytest.approx(gamma_eff)


def test_fixed_global_batch_is_unimodal_in_gpus():
    xs = [job_throughput(P, 256, c) for c in range(1, 65)]
    peak = max(range(len(xs)), key=xs.__getitem__)
    assert 0 < peak < len(xs) - 1
    assert all(a <= b for a, b in zip(xs[:peak], xs[1:peak + 1]))
    assert all(a >= b for a, b in zip(xs[peak:], xs[peak + 1:]))


@given(st.integers(1, 2048), st.integers(1, 32))
def test_doubling_batch_and_gpus_increases_throughput(batch, gpus):
    assert job_throughput(P, 2 * batch, 2 * gpus) > job_throughput(P, batch, gpus)


def test_rejects_bad_params():
    with pytest.raises(ValueError):
        ThroughputModelParams(0.0, 1.0, 0.1)
    with pytest.raises(ValueError):
        ThroughputModelParams(1.0, 1.0, 0.1, intra_node_discount=1.5)
    with pytest.raises(ValueError):
        throughput(P, 0, 1)


@given(st.floats(1, 4096), st.integers(1, 16), st.integers(1, 4))
def test_throughput_positive_and_finite(local, gpus, nodes):
    x = throughput(P, local, gpus, nodes)
    assert x > 0 and math.isfinite(x)
