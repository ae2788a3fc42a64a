"""Admission queue with opportunistic local placement and eviction.

One cluster queue. Interactive sessions always outrank batch jobs; batch
jobs use idle local capacity and are evicted the moment a new session
contends for it. Offload-compatible batch jobs that cannot (or should
not) run locally are routed to ready virtual nodes.

All state mutation happens through one logical owner: the live service
funnels every mutation through its event loop thread, the scenario
runner calls from its single thread. Methods here therefore do not lock.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Protocol, Sequence

from .model import (
    JobEvent,
    JobRecord,
    JobState,
    WorkloadKind,
    WorkloadSpec,
    transition,
)
from .resources import ResourceVector, fits

# env key a submitter may set to keep a flagged job off the local pool
PLACEMENT_HINT_ENV = "GATEWAY_PLACEMENT_HINT"


class DuplicateJob(Exception):
    pass


class NotContended(Exception):
    """Eviction planning was asked for a trigger that already fits."""


class StalePlan(Exception):
    """State changed since the plan was computed; caller recomputes."""


class NodeOrder(str, enum.Enum):
    ROUND_ROBIN = "round_robin"
    LEAST_LOADED = "least_loaded"


@dataclass(frozen=True)
class RoutingPolicy:
    # jobs shorter than this are never routed remote even if flagged
    min_offload_duration_s: int = 60
    node_order: NodeOrder = NodeOrder.LEAST_LOADED

    def __post_init__(self):
        if self.min_offload_duration_s < 0:
            raise ValueError("min_offload_duration_s must be >= 0")
        if isinstance(self.node_order, str):
            object.__setattr__(self, "node_order", NodeOrder(self.node_order))


@dataclass(frozen=True)
class NodeView:
    """Controller-side snapshot of a virtual node's placement headroom."""

    node_id: str
    ready: bool
    free: ResourceVector
    advertised: ResourceVector

    def load_fraction(self) -> float:
        """Dominant-resource share of advertised capacity in use."""
        fractions = [0.0]
        if self.advertised.cpu_millicores > 0:
            used = self.advertised.cpu_millicores - self.free.cpu_millicores
            fractions.append(used / self.advertised.cpu_millicores)
        if self.advertised.memory_bytes > 0:
            used = self.advertised.memory_bytes - self.free.memory_bytes
            fractions.append(used / self.advertised.memory_bytes)
        for model, total in self.advertised.gpus.items():
            used = total - self.free.gpus.get(model, 0)
            fractions.append(used / total)
        return max(fractions)


class NodeDirectory(Protocol):
    def views(self, now: float) -> Sequence[NodeView]: ...


class _EmptyDirectory:
    def views(self, now: float) -> Sequence[NodeView]:
        return ()


@dataclass(frozen=True)
class Decision:
    job_id: str
    action: str  # "local" | "remote" | "wait"
    node: Optional[str] = None
    reason: str = ""


@dataclass(frozen=True)
class EvictionPlan:
    victims: tuple[str, ...]  # youngest-admitted-first
    freed: ResourceVector
    trigger: str  # workload_id of the interactive demand


@dataclass
class _PendingEntry:
    enqueue_time: float
    seq: int


def route_remote_only(job: JobRecord | WorkloadSpec, policy: RoutingPolicy) -> bool:
    """Whether a job may ever be placed on a virtual node."""
    spec = job.spec if isinstance(job, JobRecord) else job
    return (
        spec.offload_compatible
        and spec.expected_duration_s >= policy.min_offload_duration_s
        and all(ref.shareable for ref in spec.secret_refs)
    )


class QueueController:
    def __init__(
        self,
        local_capacity: ResourceVector,
        routing: RoutingPolicy | None = None,
        clock=None,
        node_directory: NodeDirectory | None = None,
    ):
        self.local_capacity = local_capacity
        self.local_allocated = ResourceVector()
        self.routing = routing or RoutingPolicy()
        self._clock = clock
        self._directory: NodeDirectory = node_directory or _EmptyDirectory()
        self.jobs: dict[str, JobRecord] = {}
        self._pending: dict[str, _PendingEntry] = {}
        self._first_enqueued_at: dict[str, float] = {}
        self._seq = 0
        self._admit_seq = 0
        self._cycle = 0
        # locally occupying jobs: id -> (demand, admit order, finish time)
        self._local_active: dict[str, tuple[ResourceVector, int, float]] = {}
        self._rr_cursor = 0
        self.decisions: list[dict] = []
        self.evicted_total = 0
        self.submitted_total = 0

    # -- helpers --------------------------------------------------------

    def set_node_directory(self, directory: NodeDirectory) -> None:
        self._directory = directory

    def _now(self) -> float:
        return self._clock.now() if self._clock else 0.0

    def free_local(self) -> ResourceVector:
        return self.local_capacity.subtract(self.local_allocated)

    def record(self, job_id: str) -> JobRecord:
        return self.jobs[job_id]

    def _class_rank(self, spec: WorkloadSpec) -> int:
        return 0 if spec.kind is WorkloadKind.INTERACTIVE_SESSION else 1

    def scheduling_order(self) -> list[str]:
        """Pending ids, interactive first, FIFO by enqueue time within class."""
        return sorted(
            self._pending,
            key=lambda jid: (
                self._class_rank(self.jobs[jid].spec),
                self._pending[jid].enqueue_time,
                self._pending[jid].seq,
            ),
        )

    # -- queue ops ------------------------------------------------------

    def enqueue(self, job: JobRecord) -> int:
        """Accept a new Queued record; returns its scheduling position."""
        if job.state is not JobState.QUEUED:
            raise ValueError(f"can only enqueue Queued jobs, got {job.state.value}")
        if job.workload_id in self.jobs:
            raise DuplicateJob(job.workload_id)
        now = self._now()
        self.jobs[job.workload_id] = job
        self._seq += 1
        self._pending[job.workload_id] = _PendingEntry(now, self._seq)
        self._first_enqueued_at[job.workload_id] = now
        self.submitted_total += 1
        return self.scheduling_order().index(job.workload_id)

    def _requeue(self, record: JobRecord) -> None:
        """Re-enter the queue keeping original seniority (anti-livelock)."""
        self._seq += 1
        first = self._first_enqueued_at.get(record.workload_id, self._now())
        self._pending[record.workload_id] = _PendingEntry(first, self._seq)

    # -- admission ------------------------------------------------------

    def admit_cycle(self, now: float) -> list[Decision]:
        """One reconciliation pass over the pending queue.

        Interactive jobs are considered first and may trigger eviction of
        local batch jobs; freed capacity goes to the trigger before any
        other admission. Batch jobs are placed locally when they fit,
        otherwise routed to a ready virtual node when eligible.
        """
        self._cycle += 1
        self._finish_due_local(now)
        decisions: list[Decision] = []

        views = {v.node_id: v for v in self._directory.views(now)}
        node_order = list(views)
        node_free = {nid: views[nid].free for nid in node_order}

        for job_id in self.scheduling_order():
            record = self.jobs[job_id]
            if record.state is not JobState.QUEUED:
                continue
            spec = record.spec

            if spec.kind is WorkloadKind.INTERACTIVE_SESSION:
                if fits(spec.demand, self.free_local()):
                    self._admit_local(record, now, "fits idle local capacity")
                    decisions.append(Decision(job_id, "local", reason="fits"))
                    continue
                plan = self.compute_eviction_plan(record)
                if plan is None:
                    decisions.append(
                        Decision(job_id, "wait", reason="contended; eviction infeasible")
                    )
                    continue
                self.apply_eviction(plan, now)
                self._admit_local(record, now, "admitted after eviction")
                decisions.append(
                    Decision(job_id, "local", reason=f"evicted {len(plan.victims)} batch jobs")
                )
                continue

            # batch job
            prefers_remote = spec.env.get(PLACEMENT_HINT_ENV) == "remote"
            remote_ok = route_remote_only(spec, self.routing)
            if fits(spec.demand, self.free_local()) and not (prefers_remote and remote_ok):
                self._admit_local(record, now, "opportunistic local admission")
                decisions.append(Decision(job_id, "local", reason="fits"))
                continue
            if remote_ok:
                node_id = self._pick_node(spec.demand, views, node_order, node_free)
                if node_id is not None:
                    node_free[node_id] = node_free[node_id].subtract(spec.demand)
                    self._admit_remote(record, node_id, now)
                    decisions.append(Decision(job_id, "remote", node=node_id))
                    continue
            decisions.append(Decision(job_id, "wait"))

        for decision in decisions:
            self.decisions.append(
                {
                    "t": now,
                    "cycle": self._cycle,
                    "job_id": decision.job_id,
                    "action": decision.action,
                    "node": decision.node,
                    "reason": decision.reason,
                }
            )
        return decisions

    def _pick_node(
        self,
        demand: ResourceVector,
        views: dict[str, NodeView],
        node_order: list[str],
        node_free: dict[str, ResourceVector],
    ) -> Optional[str]:
        candidates = [
            nid
            for nid in node_order
            if views[nid].ready and fits(demand, node_free[nid])
        ]
        if not candidates:
            return None
        if self.routing.node_order is NodeOrder.ROUND_ROBIN:
            self._rr_cursor += 1
            return candidates[self._rr_cursor % len(candidates)]
        # least loaded, reflecting assignments made earlier this cycle
        def load(nid: str) -> float:
            return NodeView(
                nid, True, node_free[nid], views[nid].advertised
            ).load_fraction()

        return min(candidates, key=lambda nid: (load(nid), node_order.index(nid)))

    def _admit_local(self, record: JobRecord, now: float, reason: str) -> None:
        admitted = transition(record, JobEvent.ADMIT_LOCAL, now, reason)
        # the local pool starts work immediately; there is no separate
        # placement step at desk scale
        running = transition(admitted, JobEvent.START, now, "started on local pool")
        self.jobs[record.workload_id] = running
        self._pending.pop(record.workload_id, None)
        self.local_allocated = self.local_allocated.add(record.spec.demand)
        self._admit_seq += 1
        finish_at = now + record.spec.expected_duration_s
        self._local_active[record.workload_id] = (
            record.spec.demand,
            self._admit_seq,
            finish_at,
        )

    def _admit_remote(self, record: JobRecord, node_id: str, now: float) -> None:
        updated = transition(
            record, JobEvent.ADMIT_REMOTE, now, f"routed to {node_id}", node=node_id
        )
        self.jobs[record.workload_id] = updated
        self._pending.pop(record.workload_id, None)

    def _finish_due_local(self, now: float) -> None:
        due = [
            jid
            for jid, (_, _, finish_at) in self._local_active.items()
            if finish_at <= now
        ]
        for jid in due:
            record = self.jobs[jid]
            self.jobs[jid] = transition(record, JobEvent.SUCCEED, now, "local run complete")
            self._release_local(jid)

    def _release_local(self, job_id: str) -> None:
        demand, _, _ = self._local_active.pop(job_id)
        self.local_allocated = self.local_allocated.subtract(demand)

    # -- eviction ---------------------------------------------------------

    def compute_eviction_plan(self, trigger: JobRecord) -> Optional[EvictionPlan]:
        """Pick victims youngest-admitted-first until the trigger fits.

        Returns None when evicting every local batch job still cannot
        satisfy the demand. Raises :class:`NotContended` when no eviction
        is needed in the first place.
        """
        if trigger.spec.kind is not WorkloadKind.INTERACTIVE_SESSION:
            raise NotContended("eviction plans are only computed for interactive demand")
        free = self.free_local()
        if fits(trigger.spec.demand, free):
            raise NotContended(trigger.workload_id)

        batch_local = [
            (jid, demand, admit_seq)
            for jid, (demand, admit_seq, _) in self._local_active.items()
            if self.jobs[jid].spec.kind is WorkloadKind.BATCH_JOB
        ]
        batch_local.sort(key=lambda item: item[2], reverse=True)  # youngest first

        victims: list[str] = []
        freed = ResourceVector()
        for jid, demand, _ in batch_local:
            victims.append(jid)
            freed = freed.add(demand)
            if fits(trigger.spec.demand, free.add(freed)):
                return EvictionPlan(tuple(victims), freed, trigger.workload_id)
        return None

    def apply_eviction(self, plan: EvictionPlan, now: float) -> list[str]:
        """Evict and requeue every victim within the same cycle."""
        for jid in plan.victims:
            record = self.jobs.get(jid)
            if (
                record is None
                or jid not in self._local_active
                or record.state not in (JobState.ADMITTED_LOCAL, JobState.RUNNING)
            ):
                raise StalePlan(jid)

        requeued = []
        for jid in plan.victims:
            record = self.jobs[jid]
            evicted = transition(
                record, JobEvent.EVICT, now, f"contention from {plan.trigger}"
            )
            queued = transition(evicted, JobEvent.REQUEUE, now, "requeued after eviction")
            self.jobs[jid] = queued
            self._release_local(jid)
            self._requeue(queued)
            self.evicted_total += 1
            requeued.append(jid)
        if plan.victims:
            self.decisions.append(
                {
                    "t": now,
                    "cycle": self._cycle,
                    "eviction_plan": {
                        "trigger": plan.trigger,
                        "victims": list(plan.victims),
                        "freed": plan.freed.to_json_obj(),
                    },
                }
            )
        return requeued

    # -- remote lifecycle ---------------------------------------------------

    def apply_remote_event(
        self, job_id: str, event: JobEvent, now: float, reason: str
    ) -> JobRecord:
        """Apply a virtual-node status event to the job it concerns."""
        record = self.jobs[job_id]
        updated = transition(record, event, now, reason)
        self.jobs[job_id] = updated
        if event is JobEvent.REQUEUE:
            self._requeue(updated)
        return updated

    def cancel(self, job_id: str, now: float, reason: str = "cancelled by user") -> JobRecord:
        record = self.jobs[job_id]
        updated = transition(record, JobEvent.CANCEL, now, reason)
        self.jobs[job_id] = updated
        self._pending.pop(job_id, None)
        if job_id in self._local_active:
            self._release_local(job_id)
        return updated

    # -- introspection --------------------------------------------------

    def decisions_since(self, since: float) -> list[dict]:
        return [entry for entry in self.decisions if entry["t"] >= since]

    def counts_by_state(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for record in self.jobs.values():
            counts[record.state.value] = counts.get(record.state.value, 0) + 1
        return counts

    def running_by_site(self) -> dict[str, int]:
        """Jobs in Running, grouped by the site executing them."""
        counts: dict[str, int] = {}
        for record in self.jobs.values():
            if record.state is JobState.RUNNING and record.assigned_site:
                counts[record.assigned_site] = counts.get(record.assigned_site, 0) + 1
        return counts

    def queued_count(self) -> int:
        return sum(
            1 for r in self.jobs.values() if r.state is JobState.QUEUED
        )

    def gpus_allocated(self) -> dict[str, int]:
        return dict(self.local_allocated.gpus)

    def snapshot(self) -> dict:
        order = self.scheduling_order()
        return {
            "pending": [
                {
                    "workload_id": jid,
                    "kind": self.jobs[jid].spec.kind.value,
                    "enqueued_at": self._pending[jid].enqueue_time,
                }
                for jid in order
            ],
            "local_capacity": self.local_capacity.to_json_obj(),
            "local_allocated": self.local_allocated.to_json_obj(),
            "counts_by_state": self.counts_by_state(),
            "evicted_total": self.evicted_total,
            "submitted_total": self.submitted_total,
        }
