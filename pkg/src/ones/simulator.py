"""Deterministic discrete-event simulation of a shared GPU cluster.

Jobs progress at the throughput of their current (global batch, GPUs,
placement) until they have processed their hidden total workload.  A
pluggable scheduling policy is consulted after every batch of simultaneous
events and may deploy a new genome; jobs whose configuration changes pay a
rescaling overhead.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence, Union

import numpy as np

from ones.domain import (Allocation, Checkpoint, ClusterSpec, Genome, JobRuntime, JobSpec,
                         JobStatus, validate)
from ones.metrics import MetricsRecord, Summary, aggregate
from ones.scaling import PolicyConfig, ScalingStep, apply_policies, on_arrival
from ones.throughput import job_throughput

SNAP_REL = 1e-9


class EventKind(enum.IntEnum):
    """Processing priority for events at the same instant (lower first)."""

    JOB_COMPLETE = 0
    EPOCH_COMPLETE = 1
    JOB_ARRIVAL = 2
    SCALE_COMPLETE = 3
    SCHEDULER_WAKE = 4


@dataclass(frozen=True, order=True)
class Event:
    time: float
    kind: EventKind
    job_id: int = -1


@dataclass(frozen=True)
class OverheadModelParams:
    """Seconds a job spends rescaling when its configuration changes.

    ``mode="stall"`` pauses the job (it holds its GPUs but makes no
    progress).  ``mode="account"`` leaves the dynamics untouched and adds the
    overhead to the job's execution and finish time afterwards.
    """

    elastic_scale_seconds: float = 1.0
    checkpoint_scale_seconds: float = 20.0
    mode: str = "stall"

    def __post_init__(self):
        if not 0 <= self.elastic_scale_seconds <= self.checkpoint_scale_seconds:
            raise ValueError("need 0 <= elastic_scale_seconds <= checkpoint_scale_seconds")
        if self.mode not in ("stall", "account"):
            raise ValueError(f"unknown overhead mode {self.mode!r}")

    def seconds(self, kind: str) -> float:
        if kind == "elastic":
            return self.elastic_scale_seconds
        if kind == "checkpoint":
            return self.checkpoint_scale_seconds
        raise ValueError(f"unknown overhead kind {kind!r}")


@dataclass(frozen=True)
class Decision:
    """A genome to deploy; ``partial`` deployments only restart the epoch
    counters of jobs whose allocation changed."""

    genome: Genome
    partial: bool = False


class SchedulerPolicy(Protocol):
    name: str
    overhead_kind: str
    policy_config: PolicyConfig

    def on_arrival(self, sim: "Simulator", rt: JobRuntime) -> None: ...

    def on_epoch(self, sim: "Simulator", rt: JobRuntime) -> None: ...

    def on_complete(self, sim: "Simulator", rt: JobRuntime) -> None: ...

    def decide(self, sim: "Simulator",
               triggers: set[EventKind]) -> Union[Genome, Decision, None]: ...

    def next_wake(self, sim: "Simulator") -> Optional[float]: ...


class BasePolicy:
    """No-op hooks; subclasses override what they need."""

    name = "base"
    overhead_kind = "checkpoint"

    def __init__(self):
        self.policy_config = PolicyConfig(adjust_limits=False)

    def on_arrival(self, sim, rt):
        on_arrival(rt, self.policy_config)

    def on_epoch(self, sim, rt):
        pass

    def on_complete(self, sim, rt):
        pass

    def decide(self, sim, triggers):
        return None

    def next_wake(self, sim):
        return None


@dataclass(frozen=True)
class BatchChange:
    job_id: int
    old_batch: int
    new_batch: int
    limit: int
    previous_batch: int = 0  # last batch the job ran with, 0 if it never ran


@dataclass
class Deployment:
    time: float
    changes: list[BatchChange]
    reconfigured: list[int]


@dataclass
class SimResult:
    scheduler: str
    records: list[MetricsRecord]
    summary: Summary
    steps: list[ScalingStep]
    deployments: list[Deployment]
    jobs: dict[int, JobRuntime]
    busy_gpu_seconds: float
    makespan: float
    events: int

    @property
    def reconfigurations(self) -> int:
        return sum(rt.reconfigurations for rt in self.jobs.values())

    @property
    def total_execution(self) -> float:
        return math.fsum(r.execution for r in self.records)


def logistic(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


def loss_at(spec: JobSpec, progress: float, noise_factor: float = 1.0) -> float:
    return spec.loss_init * math.exp(-spec.curve_k * progress) * noise_factor


def accuracy_from_loss(spec: JobSpec, loss: float) -> float:
    return logistic(8.0 * ((1.0 - loss / spec.loss_init) - 0.5))


class Simulator:
    def __init__(self, trace: Sequence[JobSpec], cluster: ClusterSpec, scheduler: SchedulerPolicy,
                 overhead: OverheadModelParams = OverheadModelParams(), seed: int = 0,
                 overhead_kind: Optional[str] = None, check_invariants: bool = True):
        arrivals = [s.arrival_time for s in trace]
        if any(b < a for a, b in zip(arrivals, arrivals[1:])):
            raise ValueError("trace arrival times must be nondecreasing")
        if len({s.job_id for s in trace}) != len(trace):
            raise ValueError("duplicate job ids in trace")
        self.trace = list(trace)
        self.cluster = cluster
        self.scheduler = scheduler
        self.overhead = overhead
        self.overhead_kind = overhead_kind or scheduler.overhead_kind
        self.overhead.seconds(self.overhead_kind)
        self.seed = seed
        self.check_invariants = check_invariants

        self.now = 0.0
        self.jobs: dict[int, JobRuntime] = {}
        self.genome = Genome.idle(cluster)
        self.rates: dict[int, float] = {}
        self.steps: list[ScalingStep] = []
        self.deployments: list[Deployment] = []
        self.busy_gpu_seconds = 0.0
        self.events = 0
        self._next_arrival = 0
        self._noise: dict[int, np.random.Generator] = {}

    # -- views used by policies ----------------------------------------------

    def throughput(self, job_id: int, global_batch: int, gpu_count: int, node_count: int) -> float:
        return job_throughput(self.jobs[job_id].spec.throughput, global_batch, gpu_count,
                              node_count)

    def live_jobs(self) -> dict[int, JobRuntime]:
        return {j: rt for j, rt in self.jobs.items() if not rt.is_completed}

    # -- main loop -------------------------------------------------------------

    def run(self) -> SimResult:
        total = len(self.trace)
        done = 0
        while done < total:
            t, kinds = self._next_time()
            if t is None:
                raise RuntimeError(f"simulation stalled at t={self.now:.3f} with "
                                   f"{total - done} unfinished jobs")
            self._advance(t)
            triggers: set[EventKind] = set()
            done += self._process(kinds, triggers)
            if done < total:
                decision = self.scheduler.decide(self, triggers)
                if isinstance(decision, Genome):
                    self.deploy(decision)
                elif decision is not None:
                    self.deploy(decision.genome, partial=decision.partial)
                if self.check_invariants:
                    self._check()
        records = [self._record(rt) for rt in sorted(self.jobs.values(), key=lambda r: r.job_id)]
        return SimResult(self.scheduler.name, records, aggregate(records), self.steps,
                         self.deployments, self.jobs, self.busy_gpu_seconds, self.now, self.events)

    def _target(self, rt: JobRuntime) -> float:
        spec = rt.spec
        return float(min((rt.epochs_completed + 1) * spec.epoch_size, spec.total_workload))

    def _next_time(self) -> tuple[Optional[float], set[EventKind]]:
        best: Optional[float] = None
        kinds: set[EventKind] = set()

        def offer(t: float, kind: EventKind):
            nonlocal best, kinds
            if best is None or t < best:
                best, kinds = t, {kind}
            elif t == best:
                kinds.add(kind)

        if self._next_arrival < len(self.trace):
            offer(max(self.trace[self._next_arrival].arrival_time, self.now),
                  EventKind.JOB_ARRIVAL)
        for j, rt in self.jobs.items():
            if not rt.is_running:
                continue
            start = max(self.now, rt.paused_until)
            if rt.paused_until > self.now:
                offer(rt.paused_until, EventKind.SCALE_COMPLETE)
            offer(start + (self._target(rt) - rt.processed) / self.rates[j],
                  EventKind.EPOCH_COMPLETE)
        wake = self.scheduler.next_wake(self)
        if wake is not None and wake > self.now:
            offer(wake, EventKind.SCHEDULER_WAKE)
        return best, kinds

    def _advance(self, t: float) -> None:
        dt = t - self.now
        if dt < 0:
            raise RuntimeError("time went backwards")
        for j, rt in self.jobs.items():
            if rt.is_running:
                active = max(0.0, t - max(self.now, rt.paused_until))
                work = self.rates[j] * active
                rt.processed += work
                rt.work_integral += work
                rt.executed_time += dt
                rt.attained_service += rt.gpu_count * dt
                self.busy_gpu_seconds += rt.gpu_count * dt
                target = self._target(rt)
                if abs(target - rt.processed) <= SNAP_REL * target:
                    rt.processed = target
            elif rt.is_waiting:
                rt.queued_time += dt
        self.now = t

    def _process(self, kinds: set[EventKind], triggers: set[EventKind]) -> int:
        finished = 0
        reached = sorted(j for j, rt in self.jobs.items()
                         if rt.is_running and rt.processed >= self._target(rt))
        for j in reached:
            rt = self.jobs[j]
            if rt.processed >= rt.spec.total_workload:
                self._complete(rt)
                triggers.add(EventKind.JOB_COMPLETE)
                finished += 1
                self.events += 1
        for j in reached:
            rt = self.jobs[j]
            if rt.is_running:
                self._epoch(rt)
                triggers.add(EventKind.EPOCH_COMPLETE)
                self.events += 1
        while (self._next_arrival < len(self.trace)
               and self.trace[self._next_arrival].arrival_time <= self.now):
            self._arrive(self.trace[self._next_arrival])
            self._next_arrival += 1
            triggers.add(EventKind.JOB_ARRIVAL)
            self.events += 1
        if EventKind.SCALE_COMPLETE in kinds:
            triggers.add(EventKind.SCALE_COMPLETE)
            self.events += 1
        if EventKind.SCHEDULER_WAKE in kinds:
            triggers.add(EventKind.SCHEDULER_WAKE)
            self.events += 1
        return finished

    # -- event handlers ------------------------------------------------------

    def _arrive(self, spec: JobSpec) -> None:
        rt = JobRuntime(spec)
        self.jobs[spec.job_id] = rt
        self._noise[spec.job_id] = np.random.default_rng([self.seed, spec.job_id])
        self.scheduler.on_arrival(self, rt)

    def _epoch(self, rt: JobRuntime) -> None:
        rt.epochs_completed += 1
        rt.epochs_since_deploy += 1
        spec = rt.spec
        factor = 1.0
        if spec.curve_noise > 0:
            factor = math.exp(spec.curve_noise * self._noise[rt.job_id].standard_normal())
        rt.current_loss = loss_at(spec, rt.processed / spec.total_workload, factor)
        rt.current_accuracy = accuracy_from_loss(spec, rt.current_loss)
        rt.checkpoints.append(Checkpoint(self.now, rt.processed, rt.loss_improvement,
                                         rt.current_accuracy))
        self.scheduler.on_epoch(self, rt)

    def _complete(self, rt: JobRuntime) -> None:
        rt.processed = float(rt.spec.total_workload)
        rt.status = JobStatus.COMPLETED
        rt.finish_time = self.now
        rt.last_batch = rt.global_batch
        rt.global_batch = 0
        rt.gpu_count = 0
        rt.slots = ()
        self.rates.pop(rt.job_id, None)
        self.genome = Genome(self.cluster, [None if s is not None and s[0] == rt.job_id else s
                                            for s in self.genome.slots])
        self.scheduler.on_complete(self, rt)

    # -- deployment ----------------------------------------------------------

    def deploy(self, genome: Genome, partial: bool = False) -> Deployment:
        """Install ``genome`` as the running schedule, charging rescaling overhead."""
        if genome.cluster != self.cluster:
            raise ValueError("genome is for a different cluster")
        for j in genome.jobs():
            rt = self.jobs.get(j)
            if rt is None or rt.is_completed:
                raise RuntimeError(f"deployed genome references unavailable job {j}")
        bad = validate(genome, self.jobs)
        if bad is not None:
            raise RuntimeError(f"invalid genome deployed at t={self.now:.3f}: {bad.reason}")
        old_alloc = self.genome.allocation()
        new_alloc = genome.allocation()
        old_batches = {j: rt.global_batch for j, rt in self.jobs.items()}
        self.steps.extend(apply_policies(self.jobs, genome, self.now,
                                         self.scheduler.policy_config))
        cost = self.overhead.seconds(self.overhead_kind)
        changes, reconfigured = [], []
        for j in sorted(self.jobs):
            rt = self.jobs[j]
            if rt.is_completed:
                continue
            new: Optional[Allocation] = new_alloc.get(j)
            old: Optional[Allocation] = old_alloc.get(j)
            changed = new != old if old is None or new is None else (
                (old.global_batch, old.slots) != (new.global_batch, new.slots))
            if not partial or changed:
                rt.epochs_since_deploy = 0
            if new is None:
                if old is not None:
                    rt.preemptions += 1
                    rt.status = JobStatus.WAITING
                    rt.slots = ()
                    self.rates.pop(j, None)
                continue
            changes.append(BatchChange(j, old_batches[j], new.global_batch, rt.batch_limit,
                                       rt.last_batch))
            if changed and rt.has_started:
                rt.reconfigurations += 1
                rt.overhead_time += cost
                reconfigured.append(j)
                if self.overhead.mode == "stall":
                    rt.paused_until = max(rt.paused_until, self.now) + cost
            if rt.start_time is None:
                rt.start_time = self.now
            rt.status = JobStatus.RUNNING
            rt.slots = new.slots
            rt.last_batch = new.global_batch
            self.rates[j] = self.throughput(j, new.global_batch, new.gpu_count, new.node_count)
        self.genome = genome
        record = Deployment(self.now, changes, reconfigured)
        self.deployments.append(record)
        if self.check_invariants:
            self._check()
        return record

    def _check(self) -> None:
        for j, rt in self.jobs.items():
            if rt.is_running:
                if rt.global_batch < 1 or rt.gpu_count < 1:
                    raise AssertionError(f"job {j} running without resources")
                if rt.global_batch > rt.batch_limit:
                    raise AssertionError(f"job {j}: batch {rt.global_batch} > limit "
                                         f"{rt.batch_limit}")
            elif rt.is_waiting and (rt.global_batch or rt.gpu_count):
                raise AssertionError(f"waiting job {j} holds resources")

    def _record(self, rt: JobRuntime) -> MetricsRecord:
        spec = rt.spec
        finish = rt.finish_time
        if self.overhead.mode == "account":
            finish += rt.overhead_time
        jct = finish - spec.arrival_time
        return MetricsRecord(
            job_id=rt.job_id, arrival=spec.arrival_time,
            start=rt.start_time if rt.start_time is not None else finish,
            finish=finish, jct=jct, queuing=rt.queued_time, execution=jct - rt.queued_time,
            final_batch=rt.last_batch, preemptions=rt.preemptions,
            reconfigurations=rt.reconfigurations, overhead=rt.overhead_time)


def simulate(trace: Sequence[JobSpec], cluster: ClusterSpec, scheduler: SchedulerPolicy,
             overhead: OverheadModelParams = OverheadModelParams(), seed: int = 0,
             overhead_kind: Optional[str] = None) -> SimResult:
    return Simulator(trace, cluster, scheduler, overhead, seed, overhead_kind).run()
