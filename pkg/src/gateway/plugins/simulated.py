"""Simulated batch-site backends.

Each site is a seeded model: jobs wait a sampled queue delay, start when
a slot frees up inside an availability window, run for their requested
walltime, and finish with a seeded failure draw. Two runs with the same
model and the same request stream produce identical timelines.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Mapping, Optional

from ..resources import ResourceVector
from .base import (
    BackendJob,
    BackendJobState,
    PluginJobRequest,
    SiteUnavailable,
    UNKNOWN_STATUS,
)

# exit code recorded for cancelled simulated jobs (SIGTERM convention)
CANCELLED_EXIT_CODE = 143

DEFAULT_SLOT_RESOURCES = ResourceVector(cpu_millicores=4000, memory_bytes=8 << 30)


@dataclass(frozen=True)
class DelaySpec:
    """Queue-delay distribution: fixed seconds or lognormal(mu, sigma)."""

    kind: str = "fixed"
    value: float = 0.0
    mu: float = 0.0
    sigma: float = 1.0

    def __post_init__(self):
        if self.kind not in ("fixed", "lognormal"):
            raise ValueError(f"unknown delay kind {self.kind!r}")

    def sample(self, rng: random.Random) -> float:
        if self.kind == "fixed":
            return float(self.value)
        return rng.lognormvariate(self.mu, self.sigma)

    def to_json_obj(self) -> dict:
        if self.kind == "fixed":
            return {"kind": "fixed", "value": self.value}
        return {"kind": "lognormal", "mu": self.mu, "sigma": self.sigma}

    @classmethod
    def from_json_obj(cls, obj) -> "DelaySpec":
        if isinstance(obj, (int, float)):
            return cls(kind="fixed", value=float(obj))
        kind = obj.get("kind", "fixed")
        if kind == "fixed":
            return cls(kind="fixed", value=float(obj.get("value", 0.0)))
        return cls(kind="lognormal", mu=float(obj["mu"]), sigma=float(obj["sigma"]))


@dataclass(frozen=True)
class SiteModel:
    site: str
    slots: int
    queue_delay: DelaySpec = field(default_factory=DelaySpec)
    failure_prob: float = 0.0
    # None = always available; empty tuple = never
    availability: Optional[tuple[tuple[float, float], ...]] = None
    seed: int = 0
    slot_resources: ResourceVector = field(default=DEFAULT_SLOT_RESOURCES)
    # advertised placement headroom; defaults to slots * slot_resources.
    # Batch sites commonly accept a deeper queue than they run at once.
    advertised_capacity: Optional[ResourceVector] = None

    def __post_init__(self):
        if self.slots < 0:
            raise ValueError("slots must be >= 0")
        if not 0.0 <= self.failure_prob <= 1.0:
            raise ValueError("failure_prob must be in [0, 1]")
        if self.availability is not None:
            windows = tuple((float(a), float(b)) for a, b in self.availability)
            last_end = None
            for start, end in windows:
                if end <= start:
                    raise ValueError(f"empty availability window ({start}, {end})")
                if last_end is not None and start < last_end:
                    raise ValueError("availability windows must be ordered, non-overlapping")
                last_end = end
            object.__setattr__(self, "availability", windows)

    def capacity(self) -> ResourceVector:
        if self.advertised_capacity is not None:
            return self.advertised_capacity
        total = ResourceVector()
        for _ in range(self.slots):
            total = total.add(self.slot_resources)
        return total

    def available_at(self, t: float) -> bool:
        if self.availability is None:
            return True
        return any(start <= t < end for start, end in self.availability)

    def next_available(self, t: float) -> Optional[float]:
        """Earliest instant >= t inside a window; None when there is none."""
        if self.availability is None:
            return t
        for start, end in self.availability:
            if t < end:
                return max(t, start)
        return None

    def join_time(self) -> float:
        """When the site becomes part of the pool (first window start)."""
        if self.availability is None:
            return 0.0
        if not self.availability:
            return 0.0  # integrated from the start, just never able to run
        return self.availability[0][0]

    @classmethod
    def from_json_obj(cls, site: str, obj: Mapping) -> "SiteModel":
        availability = obj.get("availability")
        if availability is not None:
            availability = tuple((float(a), float(b)) for a, b in availability)
        slot_resources = DEFAULT_SLOT_RESOURCES
        if obj.get("slot_resources"):
            slot_resources = ResourceVector.from_json_obj(obj["slot_resources"])
        advertised = None
        if obj.get("advertised_capacity"):
            advertised = ResourceVector.from_json_obj(obj["advertised_capacity"])
        return cls(
            site=site,
            slots=int(obj.get("slots", 0)),
            queue_delay=DelaySpec.from_json_obj(obj.get("queue_delay", 0)),
            failure_prob=float(obj.get("failure_prob", 0.0)),
            availability=availability,
            seed=int(obj.get("seed", 0)),
            slot_resources=slot_resources,
            advertised_capacity=advertised,
        )


@dataclass
class _SimJob:
    job: BackendJob
    seq: int
    eligible_at: Optional[float]  # None = never (no window after the delay)
    runtime: float
    will_fail: bool


class SimulatedSiteBackend:
    """Deterministic batch-site model behind the plugin protocol."""

    def __init__(self, model: SiteModel, clock):
        self.model = model
        self.site = model.site
        self._clock = clock
        self._rng = random.Random(model.seed)
        self._jobs: dict[str, _SimJob] = {}
        self._seq = 0
        self._cursor = 0.0  # timeline position advance() has reached

    # -- protocol operations -------------------------------------------

    def create(self, request: PluginJobRequest) -> str:
        now = self._clock.now()
        self.advance(now)
        existing = self._jobs.get(request.job_id)
        if existing is not None:
            # idempotent by job_id: duplicates (including retries after a
            # lost response) never schedule a second execution
            return self._ref(request.job_id)
        if not self.model.available_at(now):
            raise SiteUnavailable(self.site)

        delay = self.model.queue_delay.sample(self._rng)
        will_fail = self._rng.random() < self.model.failure_prob
        eligible = self.model.next_available(now + delay)
        self._seq += 1
        self._jobs[request.job_id] = _SimJob(
            job=BackendJob(
                job_id=request.job_id,
                state=BackendJobState.PENDING,
                enqueued_at=now,
            ),
            seq=self._seq,
            eligible_at=eligible,
            runtime=float(request.timeout_s),
            will_fail=will_fail,
        )
        return self._ref(request.job_id)

    def status(self, job_id: str) -> dict:
        self.advance(self._clock.now())
        sim = self._jobs.get(job_id)
        if sim is None:
            return dict(UNKNOWN_STATUS)
        return sim.job.status_doc()

    def logs(self, job_id: str, tail: int) -> str:
        self.advance(self._clock.now())
        sim = self._jobs.get(job_id)
        if sim is None:
            raise KeyError(job_id)
        lines = [f"[{self.site}] job {job_id} queued"]
        if sim.job.started_at is not None:
            lines.append(f"[{self.site}] job {job_id} started")
        if sim.job.state is BackendJobState.SUCCEEDED:
            lines.append(f"[{self.site}] job {job_id} finished exit={sim.job.exit_code}")
        elif sim.job.state is BackendJobState.FAILED:
            lines.append(f"[{self.site}] job {job_id} failed exit={sim.job.exit_code}")
        if tail <= 0:
            return ""
        return "\n".join(lines[-tail:]) + "\n"

    def delete(self, job_id: str) -> bool:
        now = self._clock.now()
        self.advance(now)
        sim = self._jobs.get(job_id)
        if sim is None:
            return False
        if not sim.job.state.terminal:
            sim.job.state = BackendJobState.FAILED
            sim.job.finished_at = now
            sim.job.exit_code = CANCELLED_EXIT_CODE
            sim.eligible_at = None
        return True

    def ping(self) -> dict:
        return {"site": self.site, "capacity": self.model.capacity().to_json_obj()}

    # -- timeline --------------------------------------------------------

    def running_count(self) -> int:
        return sum(
            1 for sim in self._jobs.values() if sim.job.state is BackendJobState.RUNNING
        )

    def job_table(self) -> dict[str, BackendJob]:
        return {job_id: sim.job for job_id, sim in self._jobs.items()}

    def _ref(self, job_id: str) -> str:
        return f"{self.site}:{job_id}"

    def _next_start(self) -> Optional[tuple[float, _SimJob]]:
        """Earliest possible (time, job) start given cursor and windows."""
        if self.model.slots - self.running_count() <= 0:
            return None
        best: Optional[tuple[float, int, _SimJob]] = None
        for sim in self._jobs.values():
            if sim.job.state is not BackendJobState.PENDING or sim.eligible_at is None:
                continue
            at = self.model.next_available(max(self._cursor, sim.eligible_at))
            if at is None:
                continue
            key = (at, sim.seq)
            if best is None or key < (best[0], best[1]):
                best = (at, sim.seq, sim)
        if best is None:
            return None
        return best[0], best[2]

    def _next_finish(self) -> Optional[tuple[float, _SimJob]]:
        best: Optional[tuple[float, int, _SimJob]] = None
        for sim in self._jobs.values():
            if sim.job.state is not BackendJobState.RUNNING:
                continue
            at = sim.job.started_at + sim.runtime
            key = (at, sim.seq)
            if best is None or key < (best[0], best[1]):
                best = (at, sim.seq, sim)
        if best is None:
            return None
        return best[0], best[2]

    def advance(self, to: float) -> list[tuple[float, str, str]]:
        """Fire every start/finish event with time <= ``to``, in order.

        Returns the fired events as (time, kind, job_id) for inspection.
        """
        fired: list[tuple[float, str, str]] = []
        if to < self._cursor:
            return fired
        while True:
            finish = self._next_finish()
            start = self._next_start()
            # finishes at the same instant free slots before starts claim them
            candidates = []
            if finish is not None:
                candidates.append((finish[0], 0, "finish", finish[1]))
            if start is not None:
                candidates.append((start[0], 1, "start", start[1]))
            if not candidates:
                break
            at, _, kind, sim = min(candidates, key=lambda c: (c[0], c[1]))
            if at > to:
                break
            self._cursor = max(self._cursor, at)
            if kind == "finish":
                sim.job.finished_at = at
                if sim.will_fail:
                    sim.job.state = BackendJobState.FAILED
                    sim.job.exit_code = 1
                else:
                    sim.job.state = BackendJobState.SUCCEEDED
                    sim.job.exit_code = 0
            else:
                sim.job.state = BackendJobState.RUNNING
                sim.job.started_at = at
            fired.append((at, kind, sim.job.job_id))
        self._cursor = max(self._cursor, to)
        return fired
