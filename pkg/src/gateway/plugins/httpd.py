"""HTTP layer of the plugin protocol, plus the clients that speak it.

Protocol (all bodies UTF-8 JSON except logs):

* ``POST /create``   PluginJobRequest -> 201 ``{"backend_ref": str}``
* ``GET /status?job_id=ID``          -> 200 status document
* ``GET /logs?job_id=ID&tail=N``     -> 200 text/plain
* ``POST /delete``   ``{"job_id"}``  -> 200 ``{"deleted": bool}``
* ``GET /ping``                      -> 200 ``{"site", "capacity"}``

Error mapping: 400 malformed request, 404 unknown job on logs, 503 when
the site is outside an availability window (callers retry). Status of an
unknown job is 200 with state ``unknown`` so callers can tell backend
amnesia apart from transport failure.
"""

from __future__ import annotations

import json
import logging
import random
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional
from urllib.parse import parse_qs, urlparse

import httpx

from ..model import canonical_json
from ..resources import ResourceVector
from .base import (
    MalformedRequest,
    PluginBackend,
    PluginBusy,
    PluginJobRequest,
    PluginRejected,
    PluginUnavailable,
    SiteUnavailable,
)

logger = logging.getLogger(__name__)


class PluginHTTPServer:
    """Serves one backend over the plugin protocol on a local port."""

    def __init__(self, backend: PluginBackend, host: str = "127.0.0.1", port: int = 0):
        handler = _make_handler(backend)
        self._httpd = ThreadingHTTPServer((host, port), handler)
        self._thread: Optional[threading.Thread] = None

    @property
    def address(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> None:
        self._thread = threading.Thread(
            target=self._httpd.serve_forever, name="plugin-http", daemon=True
        )
        self._thread.start()

    def serve_forever(self) -> None:
        self._httpd.serve_forever()

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=2)
            self._thread = None


def _make_handler(backend: PluginBackend):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):
            logger.debug("plugin http: " + fmt, *args)

        def _send_json(self, status: int, obj) -> None:
            body = canonical_json(obj).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _send_text(self, status: int, text: str) -> None:
            body = text.encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "text/plain; charset=utf-8")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _read_body(self):
            length = int(self.headers.get("Content-Length", "0"))
            raw = self.rfile.read(length) if length else b""
            try:
                return json.loads(raw.decode("utf-8")) if raw else {}
            except (UnicodeDecodeError, json.JSONDecodeError):
                raise MalformedRequest("body is not valid JSON")

        def do_POST(self):
            path = urlparse(self.path).path
            try:
                if path == "/create":
                    request = PluginJobRequest.from_json_obj(self._read_body())
                    ref = backend.create(request)
                    self._send_json(201, {"backend_ref": ref})
                elif path == "/delete":
                    body = self._read_body()
                    job_id = body.get("job_id")
                    if not isinstance(job_id, str) or not job_id:
                        raise MalformedRequest("job_id must be a non-empty string")
                    self._send_json(200, {"deleted": backend.delete(job_id)})
                else:
                    self._send_json(404, {"error": "no such endpoint"})
            except MalformedRequest as exc:
                self._send_json(400, {"error": str(exc)})
            except SiteUnavailable:
                self._send_json(503, {"error": "site outside availability window"})

        def do_GET(self):
            parsed = urlparse(self.path)
            params = parse_qs(parsed.query)
            try:
                if parsed.path == "/status":
                    job_id = params.get("job_id", [""])[0]
                    if not job_id:
                        raise MalformedRequest("job_id query parameter required")
                    self._send_json(200, backend.status(job_id))
                elif parsed.path == "/logs":
                    job_id = params.get("job_id", [""])[0]
                    if not job_id:
                        raise MalformedRequest("job_id query parameter required")
                    tail = int(params.get("tail", ["10"])[0])
                    try:
                        self._send_text(200, backend.logs(job_id, tail))
                    except KeyError:
                        self._send_json(404, {"error": f"unknown job {job_id!r}"})
                elif parsed.path == "/ping":
                    self._send_json(200, backend.ping())
                else:
                    self._send_json(404, {"error": "no such endpoint"})
            except MalformedRequest as exc:
                self._send_json(400, {"error": str(exc)})

    return Handler


class InProcessPluginClient:
    """Client calling a backend object directly (simulated-time runs)."""

    def __init__(self, backend: PluginBackend):
        self._backend = backend

    def create(self, request: PluginJobRequest) -> str:
        try:
            return self._backend.create(request)
        except SiteUnavailable as exc:
            raise PluginBusy(str(exc))
        except MalformedRequest as exc:
            raise PluginRejected(400, str(exc))

    def status(self, job_id: str) -> dict:
        return self._backend.status(job_id)

    def logs(self, job_id: str, tail: int) -> str:
        try:
            return self._backend.logs(job_id, tail)
        except KeyError as exc:
            raise PluginRejected(404, f"unknown job {exc}")

    def delete(self, job_id: str) -> bool:
        return self._backend.delete(job_id)

    def ping(self) -> tuple[str, ResourceVector]:
        doc = self._backend.ping()
        return doc["site"], ResourceVector.from_json_obj(doc["capacity"])


class HttpPluginClient:
    """Client speaking the protocol over HTTP."""

    def __init__(self, endpoint: str, timeout: float = 10.0):
        self._endpoint = endpoint.rstrip("/")
        self._client = httpx.Client(base_url=self._endpoint, timeout=timeout)

    def close(self) -> None:
        self._client.close()

    def _check(self, response: httpx.Response) -> httpx.Response:
        if response.status_code == 503:
            raise PluginBusy(response.text)
        if 400 <= response.status_code < 500:
            raise PluginRejected(response.status_code, response.text)
        if response.status_code >= 500:
            raise PluginUnavailable(f"{response.status_code}: {response.text}")
        return response

    def create(self, request: PluginJobRequest) -> str:
        try:
            response = self._client.post("/create", json=request.to_json_obj())
        except httpx.TransportError as exc:
            raise PluginUnavailable(str(exc))
        return self._check(response).json()["backend_ref"]

    def status(self, job_id: str) -> dict:
        try:
            response = self._client.get("/status", params={"job_id": job_id})
        except httpx.TransportError as exc:
            raise PluginUnavailable(str(exc))
        return self._check(response).json()

    def logs(self, job_id: str, tail: int) -> str:
        try:
            response = self._client.get(
                "/logs", params={"job_id": job_id, "tail": tail}
            )
        except httpx.TransportError as exc:
            raise PluginUnavailable(str(exc))
        return self._check(response).text

    def delete(self, job_id: str) -> bool:
        try:
            response = self._client.post("/delete", json={"job_id": job_id})
        except httpx.TransportError as exc:
            raise PluginUnavailable(str(exc))
        return self._check(response).json()["deleted"]

    def ping(self) -> tuple[str, ResourceVector]:
        try:
            response = self._client.get("/ping")
        except httpx.TransportError as exc:
            raise PluginUnavailable(str(exc))
        doc = self._check(response).json()
        return doc["site"], ResourceVector.from_json_obj(doc["capacity"])


class FlakyPluginClient:
    """Fault-injection wrapper dropping a seeded fraction of calls."""

    def __init__(self, inner, drop_rate: float, rng: random.Random):
        self._inner = inner
        self._drop_rate = drop_rate
        self._rng = rng

    def _maybe_drop(self, op: str) -> None:
        if self._rng.random() < self._drop_rate:
            raise PluginUnavailable(f"injected drop of {op}")

    def create(self, request: PluginJobRequest) -> str:
        self._maybe_drop("create")
        return self._inner.create(request)

    def status(self, job_id: str) -> dict:
        self._maybe_drop("status")
        return self._inner.status(job_id)

    def logs(self, job_id: str, tail: int) -> str:
        self._maybe_drop("logs")
        return self._inner.logs(job_id, tail)

    def delete(self, job_id: str) -> bool:
        self._maybe_drop("delete")
        return self._inner.delete(job_id)

    def ping(self):
        self._maybe_drop("ping")
        return self._inner.ping()
