"""Synthetic training-speed model for data-parallel jobs.

Per-GPU speed saturates with the local batch (half-saturation form) and every
extra worker adds a synchronisation penalty, so with a fixed global batch the
throughput rises, peaks and then falls as GPUs are added.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class ThroughputModelParams:
    per_gpu_peak: float  # samples/s at a saturating local batch
    half_batch: float  # local batch reaching half of the peak
    comm_penalty: float  # gamma, per extra worker
    intra_node_discount: float = 0.5

    def __post_init__(self):
        if self.per_gpu_peak <= 0 or self.half_batch <= 0 or self.comm_penalty <= 0:
            raise ValueError("throughput parameters must be positive")
        if not 0 < self.intra_node_discount <= 1:
            raise ValueError("intra_node_discount must be in (0, 1]")


def effective_penalty(params: ThroughputModelParams, gpu_count: int, node_count: int) -> float:
    """Average per-worker penalty over the placement.

    Each worker beyond the first pays ``gamma`` if it opens a new node and
    ``gamma * discount`` if it shares a node with an earlier worker.
    """
    if gpu_count <= 1:
        return 0.0
    node_count = max(1, min(node_count, gpu_count))
    cross = node_count - 1
    intra = gpu_count - node_count
    gamma = params.comm_penalty
    return gamma * (intra * params.intra_node_discount + cross) / (gpu_count - 1)


def throughput(params: ThroughputModelParams, local_batch: float, gpu_count: int,
               node_count: int = 1) -> float:
    """Samples per second for ``gpu_count`` workers each at ``local_batch``."""
    if gpu_count < 1 or local_batch <= 0:
        raise ValueError("throughput needs gpu_count >= 1 and local_batch > 0")
    per_gpu = params.per_gpu_peak * local_batch / (local_batch + params.half_batch)
    gamma_eff = effective_penalty(params, gpu_count, node_count)
    return gpu_count * per_gpu / (1.0 + gamma_eff * (gpu_count - 1))


def job_throughput(params: ThroughputModelParams, global_batch: int, gpu_count: int,
                   node_count: int = 1) -> float:
    """Throughput for a job whose global batch is split evenly over its GPUs."""
    return throughput(params, global_batch / gpu_count, gpu_count, node_count)
