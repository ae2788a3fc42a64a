"""Live gateway service.

One event-loop thread owns every state mutation: HTTP handlers, the
reconciliation ticker and the per-node sync loops only submit closures
to it and wait on the result. Node sync threads do their own plugin I/O
and publish snapshots plus lifecycle events back through the loop, so
network latency never blocks scheduling.
"""

from __future__ import annotations

import json
import logging
import queue
import re
import threading
from concurrent.futures import Future
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Callable, Optional, Sequence
from urllib.parse import parse_qs, urlparse

import yaml

from .clock import SystemClock, parse_rfc3339
from .controller import (
    Decision,
    DuplicateJob,
    NodeView,
    QueueController,
    RoutingPolicy,
)
from .gatekeeper import (
    Gatekeeper,
    GatekeeperConfig,
    SecretStore,
    SessionTemplate,
    SubmissionError,
    load_policies,
)
from .metrics import expose_metrics
from .model import (
    JobState,
    WorkloadKind,
    WorkloadSpec,
    canonical_json,
)
from .plugins.httpd import HttpPluginClient
from .resources import ResourceVector
from .virtualnode import NodeConfig, NodeRegistry, VirtualNode, apply_node_events

logger = logging.getLogger(__name__)

USER_HEADER = "X-Gateway-User"  # trusted header; authentication is out of scope

_ERROR_STATUS = {
    "not_a_member": 403,
    "quota_model_violation": 403,
    "offload_forbidden": 403,
    "spec_invalid": 400,
    "session_not_found": 404,
    "clone_not_offloadable": 409,
}


class EventLoop:
    """Single consumer thread serializing all state mutations."""

    def __init__(self):
        self._queue: "queue.Queue[tuple[Callable, Future] | None]" = queue.Queue()
        self._thread: Optional[threading.Thread] = None

    def start(self) -> None:
        self._thread = threading.Thread(target=self._run, name="gateway-loop", daemon=True)
        self._thread.start()

    def _run(self) -> None:
        while True:
            item = self._queue.get()
            if item is None:
                return
            fn, future = item
            try:
                future.set_result(fn())
            except BaseException as exc:  # surfaced to the submitter
                future.set_exception(exc)

    def submit(self, fn: Callable) -> Future:
        future: Future = Future()
        self._queue.put((fn, future))
        return future

    def call(self, fn: Callable, timeout: float = 30.0):
        return self.submit(fn).result(timeout=timeout)

    def stop(self) -> None:
        if self._thread is None:
            return
        self._queue.put(None)
        self._thread.join(timeout=5)
        self._thread = None


@dataclass
class ServeConfig:
    host: str = "127.0.0.1"
    port: int = 8080
    local_capacity: ResourceVector = field(default_factory=ResourceVector)
    routing: RoutingPolicy = field(default_factory=RoutingPolicy)
    groups: dict = field(default_factory=dict)
    secrets_dir: Optional[Path] = None
    platform_secrets: tuple[str, ...] = ()
    cycle_interval_s: float = 1.0
    nodes: tuple[NodeConfig, ...] = ()
    rewrite_reserved_fields: bool = True
    clone_strip_non_shareable: bool = True

    @classmethod
    def load(cls, path: Path | str) -> "ServeConfig":
        obj = yaml.safe_load(Path(path).read_text()) or {}
        listen = obj.get("listen") or {}
        nodes = tuple(
            NodeConfig(
                node_id=entry["node_id"],
                plugin_endpoint=entry["endpoint"],
                heartbeat_interval_s=float(entry.get("heartbeat_interval_s", 10.0)),
                ttl_s=float(entry.get("ttl_s", 30.0)),
                poll_interval_s=float(entry.get("poll_interval_s", 10.0)),
                max_retries=int(entry.get("max_retries", 5)),
            )
            for entry in obj.get("nodes", [])
        )
        submit = obj.get("submit") or {}
        return cls(
            host=listen.get("host", "127.0.0.1"),
            port=int(listen.get("port", 8080)),
            local_capacity=ResourceVector.from_json_obj(obj.get("local_capacity") or {}),
            routing=RoutingPolicy(
                min_offload_duration_s=int(
                    (obj.get("routing") or {}).get("min_offload_duration_s", 60)
                ),
                node_order=(obj.get("routing") or {}).get("node_order", "least_loaded"),
            ),
            groups=obj.get("groups") or {},
            secrets_dir=Path(obj["secrets_dir"]) if obj.get("secrets_dir") else None,
            platform_secrets=tuple(obj.get("platform_secrets", [])),
            cycle_interval_s=float(obj.get("cycle_interval_s", 1.0)),
            nodes=nodes,
            rewrite_reserved_fields=bool(submit.get("rewrite_reserved_fields", True)),
            clone_strip_non_shareable=bool(submit.get("clone_strip_non_shareable", True)),
        )


class _SnapshotDirectory:
    """Node views published by the sync threads, read by the controller."""

    def __init__(self):
        self._views: dict[str, NodeView] = {}

    def publish(self, view: NodeView) -> None:
        self._views[view.node_id] = view

    def views(self, now: float) -> Sequence[NodeView]:
        return list(self._views.values())


class GatewayService:
    def __init__(self, config: ServeConfig, clock=None):
        self.config = config
        self.clock = clock or SystemClock()
        store = (
            SecretStore.load_from_directory(config.secrets_dir)
            if config.secrets_dir
            else SecretStore()
        )
        self.gatekeeper = Gatekeeper(
            load_policies(config.groups),
            store,
            GatekeeperConfig(
                platform_secrets=config.platform_secrets,
                clone_strip_non_shareable=config.clone_strip_non_shareable,
                rewrite_reserved_fields=config.rewrite_reserved_fields,
            ),
            clock=self.clock,
        )
        self.loop = EventLoop()
        self.directory = _SnapshotDirectory()
        self.controller = QueueController(
            local_capacity=config.local_capacity,
            routing=config.routing,
            clock=self.clock,
            node_directory=self.directory,
        )
        self.registry = NodeRegistry(self.clock)
        self._dispatch_queues: dict[str, "queue.Queue"] = {}
        self._threads: list[threading.Thread] = []
        self._stop = threading.Event()
        self._httpd: Optional[ThreadingHTTPServer] = None

    # -- lifecycle -------------------------------------------------------

    def start(self) -> None:
        self.loop.start()
        for node_config in self.config.nodes:
            client = HttpPluginClient(node_config.plugin_endpoint)
            node = self.registry.register(node_config, client)
            self._dispatch_queues[node.node_id] = queue.Queue()
            thread = threading.Thread(
                target=self._node_loop,
                args=(node,),
                name=f"node-{node.node_id}",
                daemon=True,
            )
            thread.start()
            self._threads.append(thread)
        ticker = threading.Thread(target=self._cycle_loop, name="cycle", daemon=True)
        ticker.start()
        self._threads.append(ticker)
        self._httpd = ThreadingHTTPServer(
            (self.config.host, self.config.port), _make_api_handler(self)
        )

    @property
    def address(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}"

    def serve_forever(self) -> None:
        logger.info("gateway listening on %s", self.address)
        self._httpd.serve_forever()

    def start_http(self) -> None:
        thread = threading.Thread(
            target=self._httpd.serve_forever, name="gateway-http", daemon=True
        )
        thread.start()
        self._threads.append(thread)

    def stop(self) -> None:
        self._stop.set()
        if self._httpd is not None:
            self._httpd.shutdown()
            self._httpd.server_close()
        self.loop.stop()

    # -- background loops ---------------------------------------------------

    def _cycle_loop(self) -> None:
        while not self._stop.wait(self.config.cycle_interval_s):
            try:
                self.loop.call(self._run_cycle)
            except Exception:
                logger.exception("admit cycle failed")

    def _run_cycle(self) -> None:
        now = self.clock.now()
        decisions = self.controller.admit_cycle(now)
        for decision in decisions:
            if decision.action == "remote":
                job = self.controller.record(decision.job_id)
                self._dispatch_queues[decision.node].put(job)

    def _node_loop(self, node: VirtualNode) -> None:
        """Owns the node's plugin I/O; reports results through the loop."""
        pending = self._dispatch_queues[node.node_id]
        interval = min(node.config.heartbeat_interval_s, node.config.poll_interval_s)
        resolver = self.gatekeeper.secret_store.resolve_shareable
        while not self._stop.is_set():
            try:
                job = pending.get(timeout=interval)
                events = node.dispatch(job, resolver)
                now = self.clock.now()
                self.loop.call(lambda: apply_node_events(self.controller, events, now))
            except queue.Empty:
                pass
            except Exception:
                logger.exception("dispatch on node %s failed", node.node_id)
            try:
                now = self.clock.now()
                events = node.sync(now)
                view = node.view(now)
                self.loop.call(
                    lambda: (
                        self.directory.publish(view),
                        apply_node_events(self.controller, events, now),
                    )
                )
            except Exception:
                logger.exception("sync on node %s failed", node.node_id)

    # -- API operations (executed on the event loop) -----------------------

    def submit_workload(self, spec: WorkloadSpec, submitter: str) -> dict:
        def op():
            record = self.gatekeeper.submit(spec, submitter)
            self.controller.enqueue(record)
            if record.spec.kind is WorkloadKind.INTERACTIVE_SESSION:
                self.gatekeeper.register_session(
                    SessionTemplate(
                        session_id=record.workload_id,
                        spec=record.spec,
                        startup_command=record.spec.command,
                    )
                )
            return record.to_json_obj()

        return self.loop.call(op)

    def clone_session(self, session_id: str, command, offload_compatible: bool) -> dict:
        def op():
            spec = self.gatekeeper.clone_session(session_id, command, offload_compatible)
            session = self.gatekeeper.get_session(session_id)
            record = self.gatekeeper.submit(spec, session.spec.owner)
            self.controller.enqueue(record)
            return record.to_json_obj()

        return self.loop.call(op)

    def get_job(self, job_id: str) -> Optional[dict]:
        def op():
            record = self.controller.jobs.get(job_id)
            return None if record is None else record.to_json_obj()

        return self.loop.call(op)

    def queue_snapshot(self) -> dict:
        return self.loop.call(self.controller.snapshot)

    def decisions_since(self, since: float) -> list[dict]:
        return self.loop.call(lambda: self.controller.decisions_since(since))

    def metrics_text(self) -> str:
        def op():
            now = self.clock.now()
            all_sites = ["local"] + [n.node_id for n in self.registry.all()]
            return expose_metrics(
                running_by_site=self.controller.running_by_site(),
                all_sites=all_sites,
                queued=self.controller.queued_count(),
                evicted_total=self.controller.evicted_total,
                gpus_allocated=self.controller.gpus_allocated(),
                node_ready=self.registry.readiness_by_node(now),
            )

        return self.loop.call(op)


def _make_api_handler(service: GatewayService):
    job_path = re.compile(r"^/v1/jobs/([^/]+)$")
    clone_path = re.compile(r"^/v1/sessions/([^/]+)/clone$")

    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):
            logger.debug("api: " + fmt, *args)

        def _send(self, status: int, obj=None, text: Optional[str] = None) -> None:
            if text is not None:
                body = text.encode("utf-8")
                content_type = "text/plain; version=0.0.4; charset=utf-8"
            else:
                body = canonical_json(obj).encode("utf-8")
                content_type = "application/json"
            self.send_response(status)
            self.send_header("Content-Type", content_type)
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _body(self) -> dict:
            length = int(self.headers.get("Content-Length", "0"))
            raw = self.rfile.read(length) if length else b""
            if not raw:
                return {}
            return json.loads(raw.decode("utf-8"))

        def do_POST(self):
            path = urlparse(self.path).path
            try:
                if path == "/v1/jobs":
                    submitter = self.headers.get(USER_HEADER, "")
                    if not submitter:
                        self._send(401, {"error": "missing user header"})
                        return
                    spec = WorkloadSpec.from_json_obj(self._body())
                    self._send(201, service.submit_workload(spec, submitter))
                    return
                clone = clone_path.match(path)
                if clone:
                    body = self._body()
                    record = service.clone_session(
                        clone.group(1),
                        body.get("command", []),
                        bool(body.get("offload_compatible", False)),
                    )
                    self._send(201, record)
                    return
                self._send(404, {"error": "no such endpoint"})
            except SubmissionError as exc:
                self._send(_ERROR_STATUS.get(exc.code, 400), exc.to_json_obj())
            except DuplicateJob as exc:
                self._send(409, {"error": "duplicate_job", "message": str(exc)})
            except (KeyError, ValueError, TypeError) as exc:
                self._send(400, {"error": "bad_request", "message": str(exc)})

        def do_GET(self):
            parsed = urlparse(self.path)
            path = parsed.path
            try:
                match = job_path.match(path)
                if match:
                    record = service.get_job(match.group(1))
                    if record is None:
                        self._send(404, {"error": "unknown job"})
                    else:
                        self._send(200, record)
                    return
                if path == "/v1/queue":
                    self._send(200, service.queue_snapshot())
                    return
                if path == "/v1/decisions":
                    params = parse_qs(parsed.query)
                    raw = params.get("since", ["0"])[0]
                    try:
                        since = float(raw)
                    except ValueError:
                        since = parse_rfc3339(raw)
                    self._send(200, {"decisions": service.decisions_since(since)})
                    return
                if path == "/metrics":
                    self._send(200, text=service.metrics_text())
                    return
                self._send(404, {"error": "no such endpoint"})
            except Exception as exc:  # defensive: API must answer
                logger.exception("GET %s failed", path)
                self._send(500, {"error": "internal", "message": str(exc)})

    return Handler
