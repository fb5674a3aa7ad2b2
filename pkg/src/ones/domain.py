"""Core types shared by the scheduler, the simulator and the baselines."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Optional, Sequence

from ones.throughput import ThroughputModelParams


class GpuId(NamedTuple):
    """A device address; tuple ordering gives (node, device) order."""

    node_index: int
    device_index: int


@dataclass(frozen=True)
class ClusterSpec:
    nodes: int
    gpus_per_node: int

    def __post_init__(self):
        if self.nodes < 1 or self.gpus_per_node < 1:
            raise ValueError("cluster needs at least one node and one GPU per node")

    @property
    def size(self) -> int:
        return self.nodes * self.gpus_per_node

    def gpu(self, slot: int) -> GpuId:
        return GpuId(slot // self.gpus_per_node, slot % self.gpus_per_node)

    def slot_of(self, gpu: GpuId) -> int:
        if not (0 <= gpu.node_index < self.nodes and 0 <= gpu.device_index < self.gpus_per_node):
            raise ValueError(f"{gpu} is outside the cluster")
        return gpu.node_index * self.gpus_per_node + gpu.device_index

    def gpus(self) -> list[GpuId]:
        return [self.gpu(i) for i in range(self.size)]

    @classmethod
    def with_gpus(cls, total: int, gpus_per_node: int = 4) -> "ClusterSpec":
        """Smallest layout of ``gpus_per_node``-wide nodes holding ``total`` GPUs."""
        if total < 1:
            raise ValueError("total must be >= 1")
        if total < gpus_per_node:
            return cls(1, total)
        if total % gpus_per_node:
            raise ValueError(f"{total} GPUs do not split into nodes of {gpus_per_node}")
        return cls(total // gpus_per_node, gpus_per_node)


@dataclass(frozen=True)
class JobSpec:
    """Static description of a training job as submitted."""

    job_id: int
    arrival_time: float
    epoch_size: int
    total_workload: int  # samples to convergence; hidden from the schedulers
    initial_batch_size: int
    initial_learning_rate: float
    max_local_batch: int
    loss_init: float
    throughput: ThroughputModelParams
    curve_k: float = 3.0
    curve_noise: float = 0.0
    template: str = "custom"

    def __post_init__(self):
        if self.epoch_size < 1:
            raise ValueError(f"job {self.job_id}: epoch_size must be >= 1")
        if self.total_workload < self.epoch_size:
            raise ValueError(f"job {self.job_id}: total_workload must be >= epoch_size")
        if self.arrival_time < 0:
            raise ValueError(f"job {self.job_id}: arrival_time must be >= 0")
        if self.initial_batch_size < 1 or self.max_local_batch < 1:
            raise ValueError(f"job {self.job_id}: batch sizes must be >= 1")
        if self.loss_init <= 0:
            raise ValueError(f"job {self.job_id}: loss_init must be positive")

    @property
    def requested_gpus(self) -> int:
        """GPUs needed to hold the submitted batch at the memory cap."""
        return -(-self.initial_batch_size // self.max_local_batch)

    @property
    def single_gpu_batch(self) -> int:
        return min(self.initial_batch_size, self.max_local_batch)


class JobStatus(enum.Enum):
    WAITING = "waiting"
    RUNNING = "running"
    COMPLETED = "completed"


class Checkpoint(NamedTuple):
    """Training-log entry written at an epoch boundary."""

    time: float
    processed: float
    loss_improvement: float
    accuracy: float


@dataclass
class JobRuntime:
    """Evolving state of one job; mutated only by the simulator loop."""

    spec: JobSpec
    status: JobStatus = JobStatus.WAITING
    global_batch: int = 0
    gpu_count: int = 0
    batch_limit: int = 1
    processed: float = 0.0
    executed_time: float = 0.0
    queued_time: float = 0.0
    epochs_completed: int = 0
    current_loss: float = 0.0
    current_accuracy: float = 0.0
    current_learning_rate: float = 0.0
    submit_time: float = 0.0
    start_time: Optional[float] = None
    finish_time: Optional[float] = None
    slots: tuple[int, ...] = ()
    previous_gpu_count: int = 0
    preemptions: int = 0
    reconfigurations: int = 0
    overhead_time: float = 0.0
    paused_until: float = 0.0
    epochs_since_deploy: int = 0
    attained_service: float = 0.0
    work_integral: float = 0.0
    last_batch: int = 0
    allowed_batches: Optional[tuple[int, ...]] = None
    checkpoints: list[Checkpoint] = field(default_factory=list)

    def __post_init__(self):
        if not self.current_loss:
            self.current_loss = self.spec.loss_init
        if not self.current_learning_rate:
            self.current_learning_rate = self.spec.initial_learning_rate
        if self.batch_limit < 1:
            self.batch_limit = 1
        if not self.submit_time:
            self.submit_time = self.spec.arrival_time

    @property
    def job_id(self) -> int:
        return self.spec.job_id

    @property
    def is_running(self) -> bool:
        return self.status is JobStatus.RUNNING

    @property
    def is_waiting(self) -> bool:
        return self.status is JobStatus.WAITING

    @property
    def is_completed(self) -> bool:
        return self.status is JobStatus.COMPLETED

    @property
    def has_started(self) -> bool:
        return self.start_time is not None

    @property
    def loss_improvement(self) -> float:
        return 1.0 - self.current_loss / self.spec.loss_init


JobTable = Mapping[int, JobRuntime]

Slot = Optional[tuple[int, int]]  # (job_id, local_batch) or idle


class Allocation(NamedTuple):
    global_batch: int
    gpu_count: int
    node_count: int
    slots: tuple[int, ...]


def split_batch(global_batch: int, gpu_count: int) -> list[int]:
    """Near-equal local batches; the remainder goes to the lowest slots."""
    if gpu_count < 1:
        raise ValueError("gpu_count must be >= 1")
    base, rem = divmod(global_batch, gpu_count)
    return [base + 1] * rem + [base] * (gpu_count - rem)


class Genome:
    """A candidate schedule: for every GPU, the job it runs and its local batch.

    Instances are immutable and hashable so they can key score caches.
    """

    __slots__ = ("cluster", "slots", "_alloc", "_hash")

    def __init__(self, cluster: ClusterSpec, slots: Iterable[Slot]):
        self.cluster = cluster
        self.slots: tuple[Slot, ...] = tuple(slots)
        if len(self.slots) != cluster.size:
            raise ValueError(f"genome has {len(self.slots)} slots, cluster has {cluster.size}")
        self._alloc: Optional[dict[int, Allocation]] = None
        self._hash: Optional[int] = None

    @classmethod
    def idle(cls, cluster: ClusterSpec) -> "Genome":
        return cls(cluster, [None] * cluster.size)

    @classmethod
    def from_allocations(cls, cluster: ClusterSpec,
                         allocations: Mapping[int, tuple[int, Sequence[int]]]) -> "Genome":
        """Build from ``{job_id: (global_batch, slot_indices)}`` with even local batches."""
        slots: list[Slot] = [None] * cluster.size
        for job_id, (batch, indices) in allocations.items():
            for idx, local in zip(sorted(indices), split_batch(batch, len(indices))):
                if slots[idx] is not None:
                    raise ValueError(f"slot {idx} assigned twice")
                slots[idx] = (job_id, local)
        return cls(cluster, slots)

    def __eq__(self, other):
        if not isinstance(other, Genome):
            return NotImplemented
        return self.cluster == other.cluster and self.slots == other.slots

    def __hash__(self):
        if self._hash is None:
            self._hash = hash(self.slots)
        return self._hash

    def __len__(self):
        return len(self.slots)

    def __repr__(self):
        cells = ["-" if s is None else f"{s[0]}:{s[1]}" for s in self.slots]
        return f"Genome([{', '.join(cells)}])"

    def allocation(self) -> dict[int, Allocation]:
        """Per-job global batch, GPU count, node span and slot indices (cached)."""
        if self._alloc is None:
            gpn = self.cluster.gpus_per_node
            batch: dict[int, int] = {}
            where: dict[int, list[int]] = {}
            for i, s in enumerate(self.slots):
                if s is None:
                    continue
                j = s[0]
                if j in batch:
                    batch[j] += s[1]
                    where[j].append(i)
                else:
                    batch[j] = s[1]
                    where[j] = [i]
            alloc = {}
            for j, idx in where.items():
                nodes = len({i // gpn for i in idx})
                alloc[j] = Allocation(batch[j], len(idx), nodes, tuple(idx))
            self._alloc = alloc
        return self._alloc

    def jobs(self) -> list[int]:
        return list(self.allocation())

    def idle_slots(self) -> list[int]:
        return [i for i, s in enumerate(self.slots) if s is None]

    def dumps(self) -> str:
        """One line per GPU: ``node,device,job_id|-,local_batch|0``."""
        lines = []
        for i, s in enumerate(self.slots):
            gpu = self.cluster.gpu(i)
            job, local = ("-", 0) if s is None else s
            lines.append(f"{gpu.node_index},{gpu.device_index},{job},{local}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str, cluster: ClusterSpec) -> "Genome":
        slots: list[Slot] = [None] * cluster.size
        seen: set[int] = set()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise ValueError(f"line {lineno}: expected 4 fields, got {len(parts)}")
            try:
                slot = cluster.slot_of(GpuId(int(parts[0]), int(parts[1])))
            except ValueError as exc:
                raise ValueError(f"line {lineno}: {exc}") from None
            if slot in seen:
                raise ValueError(f"line {lineno}: GPU {parts[0]},{parts[1]} listed twice")
            seen.add(slot)
            if parts[2] == "-":
                if parts[3] != "0":
                    raise ValueError(f"line {lineno}: idle GPU must have local batch 0")
                continue
            local = int(parts[3])
            if local < 1:
                raise ValueError(f"line {lineno}: local batch must be >= 1")
            slots[slot] = (int(parts[2]), local)
        return cls(cluster, slots)


def global_batch_of(genome: Genome, job_id: int) -> int:
    alloc = genome.allocation().get(job_id)
    return alloc.global_batch if alloc else 0


def gpu_count_of(genome: Genome, job_id: int) -> int:
    alloc = genome.allocation().get(job_id)
    return alloc.gpu_count if alloc else 0


@dataclass(frozen=True)
class Violation:
    slot: Optional[int]
    reason: str


def validate(genome: Genome, jobs: JobTable) -> Optional[Violation]:
    """Return the first broken genome invariant, or ``None`` if the genome is valid."""
    for i, s in enumerate(genome.slots):
        if s is None:
            continue
        job_id, local = s
        rt = jobs.get(job_id)
        if rt is None:
            return Violation(i, f"unknown job {job_id}")
        if local < 1:
            return Violation(i, f"job {job_id}: local batch {local} < 1")
        if local > rt.spec.max_local_batch:
            return Violation(i, f"job {job_id}: local batch {local} exceeds memory cap "
                                f"{rt.spec.max_local_batch}")
    for job_id, alloc in genome.allocation().items():
        limit = jobs[job_id].batch_limit
        if alloc.global_batch > limit:
            return Violation(alloc.slots[0], f"job {job_id}: global batch "
                                             f"{alloc.global_batch} > {limit}")
    return None
