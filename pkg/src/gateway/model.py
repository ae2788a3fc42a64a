"""Workload specifications and the job lifecycle state machine.

All types here are immutable values; ``transition`` returns a new record
rather than mutating in place, so records are safe to share read-only.
The queue controller enforces single-writer discipline per record.

Canonical serialization is JSON with snake_case field names and RFC 3339
timestamps; it is the wire format used by every other module.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

from .clock import parse_rfc3339, rfc3339
from .resources import ResourceVector


class WorkloadKind(str, enum.Enum):
    INTERACTIVE_SESSION = "interactive_session"
    BATCH_JOB = "batch_job"


class JobState(str, enum.Enum):
    QUEUED = "Queued"
    ADMITTED_LOCAL = "AdmittedLocal"
    ADMITTED_REMOTE = "AdmittedRemote"
    RUNNING = "Running"
    EVICTED = "Evicted"
    SUCCEEDED = "Succeeded"
    FAILED = "Failed"
    UNKNOWN = "Unknown"
    CANCELLED = "Cancelled"


TERMINAL_STATES = frozenset({JobState.SUCCEEDED, JobState.FAILED, JobState.CANCELLED})


class JobEvent(str, enum.Enum):
    ADMIT_LOCAL = "admit_local"
    ADMIT_REMOTE = "admit_remote"
    START = "start"
    SUCCEED = "succeed"
    FAIL = "fail"
    EVICT = "evict"
    LOSE_CONTACT = "lose_contact"
    REQUEUE = "requeue"
    CANCEL = "cancel"


# (state, event) -> next state; anything absent is illegal
_TRANSITIONS: dict[tuple[JobState, JobEvent], JobState] = {
    (JobState.QUEUED, JobEvent.ADMIT_LOCAL): JobState.ADMITTED_LOCAL,
    (JobState.QUEUED, JobEvent.ADMIT_REMOTE): JobState.ADMITTED_REMOTE,
    (JobState.QUEUED, JobEvent.CANCEL): JobState.CANCELLED,
    (JobState.ADMITTED_LOCAL, JobEvent.START): JobState.RUNNING,
    (JobState.ADMITTED_LOCAL, JobEvent.EVICT): JobState.EVICTED,
    (JobState.ADMITTED_LOCAL, JobEvent.CANCEL): JobState.CANCELLED,
    (JobState.ADMITTED_REMOTE, JobEvent.START): JobState.RUNNING,
    (JobState.ADMITTED_REMOTE, JobEvent.LOSE_CONTACT): JobState.UNKNOWN,
    (JobState.ADMITTED_REMOTE, JobEvent.CANCEL): JobState.CANCELLED,
    (JobState.ADMITTED_REMOTE, JobEvent.FAIL): JobState.FAILED,
    (JobState.RUNNING, JobEvent.SUCCEED): JobState.SUCCEEDED,
    (JobState.RUNNING, JobEvent.FAIL): JobState.FAILED,
    (JobState.RUNNING, JobEvent.EVICT): JobState.EVICTED,
    (JobState.RUNNING, JobEvent.LOSE_CONTACT): JobState.UNKNOWN,
    (JobState.RUNNING, JobEvent.CANCEL): JobState.CANCELLED,
    (JobState.EVICTED, JobEvent.REQUEUE): JobState.QUEUED,
    (JobState.UNKNOWN, JobEvent.REQUEUE): JobState.QUEUED,
    (JobState.UNKNOWN, JobEvent.FAIL): JobState.FAILED,
}


class IllegalTransition(Exception):
    """Raised on an event not allowed from the record's current state.

    A caller bug: abort the operation, never the process.
    """

    def __init__(self, state: JobState, event: JobEvent):
        super().__init__(f"event {event.value!r} illegal from state {state.value!r}")
        self.state = state
        self.event = event


@dataclass(frozen=True)
class SecretRef:
    """Reference to a named secret; payload bytes live only in the
    gatekeeper's store and never appear in user-visible specs."""

    name: str
    shareable: bool
    payload_ref: str = ""

    def to_json_obj(self) -> dict:
        return {
            "name": self.name,
            "shareable": self.shareable,
            "payload_ref": self.payload_ref,
        }

    @classmethod
    def from_json_obj(cls, obj: Mapping) -> "SecretRef":
        return cls(
            name=str(obj["name"]),
            shareable=bool(obj["shareable"]),
            payload_ref=str(obj.get("payload_ref", "")),
        )


@dataclass(frozen=True)
class WorkloadSpec:
    workload_id: str
    owner: str
    group: str
    image: str
    command: tuple[str, ...]
    env: Mapping[str, str] = field(default_factory=dict)
    demand: ResourceVector = field(default_factory=ResourceVector)
    secret_refs: tuple[SecretRef, ...] = ()
    offload_compatible: bool = False
    expected_duration_s: int = 1
    uses_local_storage: bool = False
    kind: WorkloadKind = WorkloadKind.BATCH_JOB

    def __post_init__(self):
        object.__setattr__(self, "command", tuple(self.command))
        object.__setattr__(self, "env", dict(self.env))
        object.__setattr__(self, "secret_refs", tuple(self.secret_refs))
        if isinstance(self.kind, str):
            object.__setattr__(self, "kind", WorkloadKind(self.kind))

    def to_json_obj(self) -> dict:
        return {
            "workload_id": self.workload_id,
            "owner": self.owner,
            "group": self.group,
            "image": self.image,
            "command": list(self.command),
            "env": {k: self.env[k] for k in sorted(self.env)},
            "demand": self.demand.to_json_obj(),
            "secret_refs": [ref.to_json_obj() for ref in self.secret_refs],
            "offload_compatible": self.offload_compatible,
            "expected_duration_s": self.expected_duration_s,
            "uses_local_storage": self.uses_local_storage,
            "kind": self.kind.value,
        }

    @classmethod
    def from_json_obj(cls, obj: Mapping) -> "WorkloadSpec":
        return cls(
            workload_id=str(obj["workload_id"]),
            owner=str(obj.get("owner", "")),
            group=str(obj["group"]),
            image=str(obj["image"]),
            command=tuple(str(c) for c in obj.get("command", [])),
            env={str(k): str(v) for k, v in dict(obj.get("env") or {}).items()},
            demand=ResourceVector.from_json_obj(obj.get("demand") or {}),
            secret_refs=tuple(
                SecretRef.from_json_obj(r) for r in obj.get("secret_refs", [])
            ),
            offload_compatible=bool(obj.get("offload_compatible", False)),
            expected_duration_s=int(obj.get("expected_duration_s", 1)),
            uses_local_storage=bool(obj.get("uses_local_storage", False)),
            kind=WorkloadKind(obj.get("kind", "batch_job")),
        )


def validate_spec(spec: WorkloadSpec) -> list[str]:
    """Return violation descriptions; empty list iff the spec is valid.

    Violations are data, not errors: the gatekeeper turns them into a
    structured rejection.
    """
    violations = []
    if not spec.workload_id:
        violations.append("workload_id must be non-empty")
    if not spec.command:
        violations.append("command must be non-empty")
    if spec.expected_duration_s <= 0:
        violations.append("expected_duration_s must be > 0")
    if spec.offload_compatible:
        if spec.uses_local_storage:
            violations.append("offload_compatible requires uses_local_storage=false")
        if any(not ref.shareable for ref in spec.secret_refs):
            violations.append("offload_compatible requires all secrets shareable")
    return violations


@dataclass(frozen=True)
class HistoryEntry:
    timestamp: float
    state: JobState
    reason: str

    def to_json_obj(self) -> dict:
        return {
            "timestamp": rfc3339(self.timestamp),
            "state": self.state.value,
            "reason": self.reason,
        }

    @classmethod
    def from_json_obj(cls, obj: Mapping) -> "HistoryEntry":
        return cls(
            timestamp=parse_rfc3339(obj["timestamp"]),
            state=JobState(obj["state"]),
            reason=str(obj.get("reason", "")),
        )


@dataclass(frozen=True)
class JobRecord:
    spec: WorkloadSpec
    state: JobState
    state_history: tuple[HistoryEntry, ...]
    assigned_site: Optional[str] = None
    eviction_count: int = 0

    @property
    def workload_id(self) -> str:
        return self.spec.workload_id

    def is_terminal(self) -> bool:
        return self.state in TERMINAL_STATES

    def to_json_obj(self) -> dict:
        return {
            "spec": self.spec.to_json_obj(),
            "state": self.state.value,
            "state_history": [entry.to_json_obj() for entry in self.state_history],
            "assigned_site": self.assigned_site,
            "eviction_count": self.eviction_count,
        }

    def to_json(self) -> str:
        return canonical_json(self.to_json_obj())

    @classmethod
    def from_json_obj(cls, obj: Mapping) -> "JobRecord":
        return cls(
            spec=WorkloadSpec.from_json_obj(obj["spec"]),
            state=JobState(obj["state"]),
            state_history=tuple(
                HistoryEntry.from_json_obj(e) for e in obj.get("state_history", [])
            ),
            assigned_site=obj.get("assigned_site"),
            eviction_count=int(obj.get("eviction_count", 0)),
        )


def new_job_record(spec: WorkloadSpec, now: float, reason: str = "submitted") -> JobRecord:
    return JobRecord(
        spec=spec,
        state=JobState.QUEUED,
        state_history=(HistoryEntry(now, JobState.QUEUED, reason),),
    )


def transition(
    job: JobRecord,
    event: JobEvent,
    now: float,
    reason: str,
    node: Optional[str] = None,
) -> JobRecord:
    """Apply one lifecycle event, returning the updated record.

    ``node`` names the target site for admit events (``"local"`` implied
    for admit_local). Raises :class:`IllegalTransition` for events not in
    the table; the input record is untouched either way.
    """
    key = (job.state, event)
    if key not in _TRANSITIONS:
        raise IllegalTransition(job.state, event)
    next_state = _TRANSITIONS[key]

    assigned = job.assigned_site
    if event is JobEvent.ADMIT_LOCAL:
        assigned = "local"
    elif event is JobEvent.ADMIT_REMOTE:
        if not node:
            raise ValueError("admit_remote requires a node id")
        assigned = node
    elif event is JobEvent.REQUEUE:
        assigned = None

    return JobRecord(
        spec=job.spec,
        state=next_state,
        state_history=job.state_history + (HistoryEntry(now, next_state, reason),),
        assigned_site=assigned,
        eviction_count=job.eviction_count + (1 if event is JobEvent.EVICT else 0),
    )


def legal_events(state: JobState) -> set[JobEvent]:
    return {event for (s, event) in _TRANSITIONS if s is state}


def canonical_json(obj) -> str:
    """The one JSON encoding used on every wire surface (byte-stable)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def replace_spec(record: JobRecord, **changes) -> JobRecord:
    """Return a copy of the record with its spec fields replaced."""
    return replace(record, spec=replace(record.spec, **changes))


def spec_with_secrets(spec: WorkloadSpec, refs: Sequence[SecretRef]) -> WorkloadSpec:
    return replace(spec, secret_refs=tuple(refs))
