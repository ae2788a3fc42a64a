"""Virtual nodes: scheduler targets that front remote sites.

A virtual node advertises capacity learned from its plugin's handshake,
renews a lease through periodic pings, translates admitted jobs into
plugin create calls, and reconciles backend status into lifecycle events
for the queue controller. It owns no job records itself; it only emits
events, which the single-writer owner applies.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

from .controller import NodeView, QueueController
from .model import IllegalTransition, JobEvent, JobRecord
from .plugins.base import (
    PluginBusy,
    PluginJobRequest,
    PluginRejected,
    PluginUnavailable,
)
from .resources import ResourceVector

logger = logging.getLogger(__name__)


class DuplicateNode(Exception):
    pass


@dataclass(frozen=True)
class NodeConfig:
    node_id: str
    plugin_endpoint: str = ""
    heartbeat_interval_s: float = 10.0
    ttl_s: float = 30.0  # three missed heartbeats at the default interval
    poll_interval_s: float = 10.0
    max_retries: int = 5
    # retry delay is capped at one poll interval so a faulted job is
    # always resolved within max_retries poll intervals
    retry_backoff_cap_s: Optional[float] = None

    def backoff_cap(self) -> float:
        return (
            self.retry_backoff_cap_s
            if self.retry_backoff_cap_s is not None
            else self.poll_interval_s
        )


@dataclass
class RemoteJobHandle:
    workload_id: str
    demand: ResourceVector
    backend_ref: str = ""
    created: bool = False
    last_observed_state: str = ""
    last_poll: float = float("-inf")
    retries: int = 0
    next_attempt_at: float = 0.0
    marked_unknown: bool = False
    started_seen: bool = False
    # held only until the create call succeeds, then cleared
    pending_request: Optional[PluginJobRequest] = None


@dataclass(frozen=True)
class NodeEvent:
    node_id: str
    workload_id: str
    event: JobEvent
    reason: str


class VirtualNode:
    def __init__(self, config: NodeConfig, client, clock):
        self.config = config
        self.node_id = config.node_id
        self._client = client
        self._clock = clock
        self.advertised_capacity = ResourceVector()
        self.last_renewal = float("-inf")
        self._last_heartbeat_attempt = float("-inf")
        self.assigned: dict[str, RemoteJobHandle] = {}
        self._expiry_handled = True

    # -- lease ------------------------------------------------------------

    def readiness(self, now: float) -> str:
        return "Ready" if now - self.last_renewal <= self.config.ttl_s else "NotReady"

    def is_ready(self, now: float) -> bool:
        return self.readiness(now) == "Ready"

    def heartbeat(self, now: float) -> str:
        """Ping the plugin; renew the lease on success.

        Once the lease has been expired for longer than the ttl, every
        assigned job is marked contact-lost exactly once; recovery later
        resolves them through status polls rather than assuming loss.
        """
        self._last_heartbeat_attempt = now
        try:
            site, capacity = self._client.ping()
            if site != self.node_id:
                logger.warning(
                    "node %s: plugin identifies as %r", self.node_id, site
                )
            self.advertised_capacity = capacity
            self.last_renewal = now
            self._expiry_handled = False
        except (PluginUnavailable, PluginRejected) as exc:
            logger.debug("node %s: heartbeat failed: %s", self.node_id, exc)
        return self.readiness(now)

    def _expiry_events(self, now: float) -> list[NodeEvent]:
        if self.is_ready(now) or self._expiry_handled:
            return []
        self._expiry_handled = True
        events = []
        for handle in self.assigned.values():
            if handle.marked_unknown:
                continue
            handle.marked_unknown = True
            handle.retries = 0
            events.append(
                NodeEvent(
                    self.node_id,
                    handle.workload_id,
                    JobEvent.LOSE_CONTACT,
                    "node lease expired",
                )
            )
        return events

    # -- capacity ----------------------------------------------------------

    def assigned_demand(self) -> ResourceVector:
        total = ResourceVector()
        for handle in self.assigned.values():
            total = total.add(handle.demand)
        return total

    def free_capacity(self) -> ResourceVector:
        used = self.assigned_demand()
        free = self.advertised_capacity
        try:
            return free.subtract(used)
        except ValueError:
            return ResourceVector()

    def view(self, now: float) -> NodeView:
        return NodeView(
            node_id=self.node_id,
            ready=self.is_ready(now),
            free=self.free_capacity(),
            advertised=self.advertised_capacity,
        )

    # -- dispatch ------------------------------------------------------------

    def dispatch(
        self,
        job: JobRecord,
        resolve_secrets: Callable[[Iterable[str]], dict[str, str]],
    ) -> list[NodeEvent]:
        """Translate an admitted job into a plugin create call.

        Create is idempotent at the backend (keyed by workload_id), so a
        retry after a lost response never starts a second execution.
        """
        now = self._clock.now()
        if not self.is_ready(now):
            raise RuntimeError(f"dispatch to NotReady node {self.node_id}")
        spec = job.spec
        non_shareable = [ref.name for ref in spec.secret_refs if not ref.shareable]
        # defense in depth: routing must never send such a job here
        assert not non_shareable, (
            f"non-shareable secrets {non_shareable} reached dispatch for "
            f"{spec.workload_id}"
        )
        if spec.workload_id in self.assigned:
            return []
        bundle = resolve_secrets(ref.name for ref in spec.secret_refs)
        request = PluginJobRequest(
            job_id=spec.workload_id,
            image=spec.image,
            command=spec.command,
            env=spec.env,
            resources=spec.demand,
            secret_bundle=bundle,
            timeout_s=spec.expected_duration_s,
        )
        handle = RemoteJobHandle(
            workload_id=spec.workload_id,
            demand=spec.demand,
            pending_request=request,
            next_attempt_at=now,
        )
        self.assigned[spec.workload_id] = handle
        return self._attempt_create(handle, now)

    def _attempt_create(self, handle: RemoteJobHandle, now: float) -> list[NodeEvent]:
        request = handle.pending_request
        assert request is not None
        try:
            handle.backend_ref = self._client.create(request)
            handle.created = True
            handle.retries = 0
            handle.pending_request = None
            return []
        except PluginRejected as exc:
            self.assigned.pop(handle.workload_id, None)
            return [
                NodeEvent(
                    self.node_id,
                    handle.workload_id,
                    JobEvent.FAIL,
                    f"plugin rejected job: {exc.body}",
                )
            ]
        except PluginBusy:
            handle.retries += 1
            handle.next_attempt_at = now + self._backoff(handle.retries)
            if handle.retries > self.config.max_retries:
                # the site will not take the job now; hand it back for
                # re-routing without blaming the node
                self.assigned.pop(handle.workload_id, None)
                return [
                    NodeEvent(
                        self.node_id,
                        handle.workload_id,
                        JobEvent.LOSE_CONTACT,
                        "site unavailable, create retries exhausted",
                    ),
                    NodeEvent(
                        self.node_id,
                        handle.workload_id,
                        JobEvent.REQUEUE,
                        "requeued for re-routing",
                    ),
                ]
            return []
        except PluginUnavailable:
            handle.retries += 1
            handle.next_attempt_at = now + self._backoff(handle.retries)
            if handle.retries > self.config.max_retries:
                self.assigned.pop(handle.workload_id, None)
                self.last_renewal = float("-inf")  # force the NotReady path
                return [
                    NodeEvent(
                        self.node_id,
                        handle.workload_id,
                        JobEvent.LOSE_CONTACT,
                        "plugin unreachable, create retries exhausted",
                    ),
                    NodeEvent(
                        self.node_id,
                        handle.workload_id,
                        JobEvent.REQUEUE,
                        "requeued after lost contact",
                    ),
                ] + self._expiry_events(now)
            return []

    def _backoff(self, retries: int) -> float:
        base = self.config.poll_interval_s
        return min(base * (2 ** (retries - 1)), self.backoff_cap())

    def backoff_cap(self) -> float:
        return self.config.backoff_cap()

    # -- reconciliation ---------------------------------------------------

    def poll_and_reconcile(self, now: float) -> list[NodeEvent]:
        """Map backend status to lifecycle events for each assigned job."""
        events: list[NodeEvent] = []
        for workload_id in list(self.assigned):
            handle = self.assigned[workload_id]
            if not handle.created:
                continue
            if now - handle.last_poll < self.config.poll_interval_s:
                continue
            handle.last_poll = now
            try:
                doc = self._client.status(workload_id)
            except PluginRejected as exc:
                logger.warning("node %s: status rejected: %s", self.node_id, exc)
                continue
            except PluginUnavailable:
                handle.retries += 1
                if handle.retries > self.config.max_retries:
                    events.extend(self._give_up(handle, "status retries exhausted"))
                continue
            handle.retries = 0
            events.extend(self._map_status(handle, doc))
        return events

    def _give_up(self, handle: RemoteJobHandle, reason: str) -> list[NodeEvent]:
        self.assigned.pop(handle.workload_id, None)
        events = []
        if not handle.marked_unknown:
            events.append(
                NodeEvent(self.node_id, handle.workload_id, JobEvent.LOSE_CONTACT, reason)
            )
        events.append(
            NodeEvent(
                self.node_id,
                handle.workload_id,
                JobEvent.REQUEUE,
                "requeued after lost contact",
            )
        )
        return events

    def _map_status(self, handle: RemoteJobHandle, doc: dict) -> list[NodeEvent]:
        state = doc.get("state", "unknown")
        handle.last_observed_state = state
        wid = handle.workload_id
        exit_code = doc.get("exit_code")

        if handle.marked_unknown:
            # contact restored: resolve through the poll, not by assumption
            self.assigned.pop(wid, None)
            if state == "failed":
                return [
                    NodeEvent(
                        self.node_id, wid, JobEvent.FAIL,
                        f"backend reported failure (exit {exit_code})",
                    )
                ]
            return [
                NodeEvent(
                    self.node_id, wid, JobEvent.REQUEUE,
                    f"contact restored, backend state {state!r}; requeued",
                )
            ]

        if state == "pending":
            return []
        if state == "running":
            if handle.started_seen:
                return []
            handle.started_seen = True
            return [
                NodeEvent(self.node_id, wid, JobEvent.START, "backend reports running")
            ]
        if state == "succeeded":
            self.assigned.pop(wid, None)
            events = []
            if not handle.started_seen:
                events.append(
                    NodeEvent(self.node_id, wid, JobEvent.START, "backend reports running")
                )
            events.append(
                NodeEvent(
                    self.node_id, wid, JobEvent.SUCCEED, f"backend exit {exit_code}"
                )
            )
            return events
        if state == "failed":
            # a run that raced running -> failed between polls collapses to
            # one fail event; the latest state wins
            self.assigned.pop(wid, None)
            return [
                NodeEvent(
                    self.node_id, wid, JobEvent.FAIL, f"backend exit {exit_code}"
                )
            ]
        # unknown or any unrecognized vocabulary: the backend forgot the job
        self.assigned.pop(wid, None)
        events = []
        if not handle.marked_unknown:
            events.append(
                NodeEvent(
                    self.node_id, wid, JobEvent.LOSE_CONTACT,
                    f"backend lost the job (state {state!r})",
                )
            )
        events.append(
            NodeEvent(self.node_id, wid, JobEvent.REQUEUE, "requeued after backend amnesia")
        )
        return events

    # -- periodic driver -----------------------------------------------------

    def sync(self, now: float) -> list[NodeEvent]:
        """One maintenance pass: heartbeat, create retries, status polls."""
        events: list[NodeEvent] = []
        if now - self._last_heartbeat_attempt >= self.config.heartbeat_interval_s:
            self.heartbeat(now)
        events.extend(self._expiry_events(now))
        for workload_id in list(self.assigned):
            handle = self.assigned.get(workload_id)
            if handle is None or handle.created:
                continue
            if now >= handle.next_attempt_at and not handle.marked_unknown:
                events.extend(self._attempt_create(handle, now))
        events.extend(self.poll_and_reconcile(now))
        return events

    def release(self, workload_id: str) -> None:
        self.assigned.pop(workload_id, None)

    def delete_remote(self, workload_id: str) -> None:
        """Best-effort backend cancellation (user-initiated cancel)."""
        try:
            self._client.delete(workload_id)
        except (PluginUnavailable, PluginRejected) as exc:
            logger.info("node %s: delete %s failed: %s", self.node_id, workload_id, exc)


class NodeRegistry:
    """All registered virtual nodes; the controller's node directory."""

    def __init__(self, clock):
        self._clock = clock
        self._nodes: dict[str, VirtualNode] = {}

    def register(self, config: NodeConfig, client) -> VirtualNode:
        if config.node_id in self._nodes:
            raise DuplicateNode(config.node_id)
        node = VirtualNode(config, client, self._clock)
        self._nodes[config.node_id] = node
        return node

    def get(self, node_id: str) -> VirtualNode:
        return self._nodes[node_id]

    def all(self) -> Sequence[VirtualNode]:
        return list(self._nodes.values())

    def views(self, now: float) -> Sequence[NodeView]:
        return [node.view(now) for node in self._nodes.values()]

    def readiness_by_node(self, now: float) -> dict[str, bool]:
        return {nid: node.is_ready(now) for nid, node in self._nodes.items()}

    def sync_all(self, now: float) -> list[NodeEvent]:
        events: list[NodeEvent] = []
        for node in self._nodes.values():
            events.extend(node.sync(now))
        return events


def apply_node_events(
    controller: QueueController,
    events: Sequence[NodeEvent],
    now: float,
) -> None:
    """Feed node events into the controller (single-writer context)."""
    for event in events:
        try:
            controller.apply_remote_event(
                event.workload_id, event.event, now, event.reason
            )
        except IllegalTransition as exc:
            # stale observation racing a user action (e.g. cancel); the
            # record's current state wins
            logger.info(
                "dropping stale node event %s for %s: %s",
                event.event.value,
                event.workload_id,
                exc,
            )
        except KeyError:
            logger.warning("node event for unknown job %s", event.workload_id)
