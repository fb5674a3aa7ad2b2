"""Fixed-batch baseline schedulers: strict FIFO, least-attained-service and greedy SRPT."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

from ones.domain import ClusterSpec, Genome, JobRuntime, Slot, split_batch
from ones.simulator import BasePolicy, EventKind

DEFAULT_THRESHOLDS = (1e3, 1e4, 1e5)
DEFAULT_PROXY_EPOCHS = 10


@dataclass
class BaselineConfig:
    kind: str = "fifo"  # fifo | las | srpt
    reschedule_interval: float = 600.0
    queue_thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS

    def __post_init__(self):
        if self.kind not in ("fifo", "las", "srpt"):
            raise ValueError(f"unknown baseline {self.kind!r}")
        if self.reschedule_interval <= 0:
            raise ValueError("reschedule_interval must be positive")
        th = tuple(self.queue_thresholds)
        if any(b <= a for a, b in zip(th, th[1:])):
            raise ValueError("queue thresholds must be strictly increasing")
        self.queue_thresholds = th


def place(cluster: ClusterSpec, current: Genome, wanted: Mapping[int, tuple[int, int]]) -> Genome:
    """Lay out ``{job: (global_batch, gpus)}`` disturbing current placements as little as possible.

    Jobs keep (a prefix of) their current GPUs; extra GPUs come from the
    lowest free slots.  Jobs are handled in the mapping's order.
    """
    if sum(c for _, c in wanted.values()) > cluster.size:
        raise ValueError("requested more GPUs than the cluster has")
    held = current.allocation()
    cells: list[Slot] = [None] * cluster.size
    chosen: dict[int, list[int]] = {}
    for job_id, (_, gpus) in wanted.items():
        mine = list(held[job_id].slots) if job_id in held else []
        chosen[job_id] = mine[:gpus]
    taken = {i for idx in chosen.values() for i in idx}
    free = [i for i in range(cluster.size) if i not in taken]
    for job_id, (batch, gpus) in wanted.items():
        idx = chosen[job_id]
        need = gpus - len(idx)
        idx = sorted(idx + free[:need])
        free = free[need:]
        for i, local in zip(idx, split_batch(batch, gpus)):
            cells[i] = (job_id, local)
    return Genome(cluster, cells)


def _arrival_order(jobs: Mapping[int, JobRuntime]) -> list[JobRuntime]:
    return sorted(jobs.values(), key=lambda rt: (rt.spec.arrival_time, rt.job_id))


class FifoFixed(BasePolicy):
    """Arrival order at the requested size; the queue head blocks everyone behind it."""

    name = "fifo"

    def decide(self, sim, triggers):
        if not triggers & {EventKind.JOB_ARRIVAL, EventKind.JOB_COMPLETE}:
            return None
        live = sim.live_jobs()
        free = sim.cluster.size - sum(rt.gpu_count for rt in live.values() if rt.is_running)
        wanted = {j: (rt.global_batch, rt.gpu_count) for j, rt in live.items() if rt.is_running}
        started = False
        for rt in _arrival_order(live):
            if rt.is_running:
                continue
            need = rt.spec.requested_gpus
            if need > free:
                break
            wanted[rt.job_id] = (rt.spec.initial_batch_size, need)
            free -= need
            started = True
        if not started:
            return None
        return place(sim.cluster, sim.genome, wanted)


def las_queue(attained: float, thresholds: Sequence[float]) -> int:
    """Index of the priority queue for a job with ``attained`` GPU-seconds."""
    for i, th in enumerate(thresholds):
        if attained < th:
            return i
    return len(thresholds)


class LasTiresias(BasePolicy):
    """Multi-level queues on attained GPU-seconds; lower queues preempt higher ones."""

    name = "las"

    def __init__(self, config: Optional[BaselineConfig] = None):
        super().__init__()
        self.config = config or BaselineConfig(kind="las")

    def _priority(self, rt: JobRuntime):
        return (las_queue(rt.attained_service, self.config.queue_thresholds),
                rt.spec.arrival_time, rt.job_id)

    def decide(self, sim, triggers):
        if not triggers & {EventKind.JOB_ARRIVAL, EventKind.JOB_COMPLETE,
                           EventKind.SCHEDULER_WAKE}:
            return None
        live = sim.live_jobs()
        free = sim.cluster.size
        chosen = []
        for rt in sorted(live.values(), key=self._priority):
            need = rt.spec.requested_gpus
            if need <= free:
                chosen.append(rt)
                free -= need
        running = {j for j, rt in live.items() if rt.is_running}
        if {rt.job_id for rt in chosen} == running:
            return None
        # surviving jobs first so they keep their GPUs
        chosen.sort(key=lambda rt: (not rt.is_running, rt.spec.arrival_time, rt.job_id))
        wanted = {rt.job_id: (rt.spec.initial_batch_size, rt.spec.requested_gpus)
                  for rt in chosen}
        return place(sim.cluster, sim.genome, wanted)

    def next_wake(self, sim):
        """Earliest time a running job crosses into a lower-priority queue."""
        best = None
        for rt in sim.jobs.values():
            if not rt.is_running:
                continue
            q = las_queue(rt.attained_service, self.config.queue_thresholds)
            if q >= len(self.config.queue_thresholds):
                continue
            t = sim.now + (self.config.queue_thresholds[q] - rt.attained_service) / rt.gpu_count
            if t <= sim.now:
                continue
            best = t if best is None else min(best, t)
        return best


def remaining_work_proxy(rt: JobRuntime, default_epochs: int = DEFAULT_PROXY_EPOCHS) -> float:
    """Samples still to process, extrapolated from the loss trajectory.

    With no completed epoch (or no loss drop yet) the job is assumed to need
    ``default_epochs`` more epochs.  Otherwise the remaining work is the work
    done so far scaled by ``L / (L0 - L)``: the closer the loss has come to
    zero relative to its drop so far, the less is left.
    """
    spec = rt.spec
    drop = spec.loss_init - rt.current_loss
    if rt.epochs_completed == 0 or drop <= 0:
        return float(default_epochs * spec.epoch_size)
    return max(rt.processed * rt.current_loss / drop, float(spec.epoch_size))


class SrptGreedy(BasePolicy):
    """Periodic greedy GPU allocation by marginal reduction of estimated remaining time.

    Between interval ticks, arrivals are started on one idle GPU each.
    """

    name = "srpt"

    def __init__(self, config: Optional[BaselineConfig] = None):
        super().__init__()
        self.config = config or BaselineConfig(kind="srpt")

    def next_wake(self, sim):
        step = self.config.reschedule_interval
        return (math.floor(sim.now / step) + 1) * step

    def decide(self, sim, triggers):
        if EventKind.SCHEDULER_WAKE in triggers:
            return self.allocate(sim)
        if EventKind.JOB_ARRIVAL in triggers:
            return self._bootstrap(sim)
        return None

    def _bootstrap(self, sim) -> Optional[Genome]:
        live = sim.live_jobs()
        idle = sim.cluster.size - sum(rt.gpu_count for rt in live.values() if rt.is_running)
        wanted = {j: (rt.global_batch, rt.gpu_count) for j, rt in live.items() if rt.is_running}
        added = False
        for rt in _arrival_order(live):
            if idle == 0:
                break
            if not rt.has_started and rt.job_id not in wanted:
                wanted[rt.job_id] = (rt.spec.initial_batch_size, 1)
                idle -= 1
                added = True
        return place(sim.cluster, sim.genome, wanted) if added else None

    def _estimate(self, sim, rt: JobRuntime, gpus: int) -> float:
        batch = rt.spec.initial_batch_size
        nodes = -(-gpus // sim.cluster.gpus_per_node)
        return remaining_work_proxy(rt) / sim.throughput(rt.job_id, batch, gpus, nodes)

    def allocation_counts(self, sim) -> dict[int, int]:
        live = _arrival_order(sim.live_jobs())
        counts: dict[int, int] = {}
        free = sim.cluster.size
        for rt in live:
            need = rt.spec.requested_gpus
            if need <= free:
                counts[rt.job_id] = need
                free -= need
        by_id = {rt.job_id: rt for rt in live}
        while free > 0:
            best, best_gain = None, 0.0
            for j, c in counts.items():
                rt = by_id[j]
                if c + 1 > rt.spec.initial_batch_size:
                    continue
                gain = self._estimate(sim, rt, c) - self._estimate(sim, rt, c + 1)
                if gain > best_gain:
                    best, best_gain = j, gain
            if best is None:
                break
            counts[best] += 1
            free -= 1
        return counts

    def allocate(self, sim) -> Optional[Genome]:
        counts = self.allocation_counts(sim)
        live = sim.live_jobs()
        order = sorted(counts, key=lambda j: (not live[j].is_running,
                                              live[j].spec.arrival_time, j))
        wanted = {j: (live[j].spec.initial_batch_size, counts[j]) for j in order}
        genome = place(sim.cluster, sim.genome, wanted)
        return None if genome == sim.genome else genome


def make_baseline(kind: str, config: Optional[BaselineConfig] = None) -> BasePolicy:
    if kind == "fifo":
        return FifoFixed()
    if kind == "las":
        return LasTiresias(config or BaselineConfig(kind="las"))
    if kind == "srpt":
        return SrptGreedy(config or BaselineConfig(kind="srpt"))
    raise ValueError(f"unknown baseline {kind!r}")
