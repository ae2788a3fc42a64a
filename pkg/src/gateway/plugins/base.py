"""Wire types and the backend interface behind the plugin protocol."""

from __future__ import annotations

import base64
import binascii
import enum
from dataclasses import dataclass, field
from typing import Mapping, Optional, Protocol

from ..clock import rfc3339
from ..resources import ResourceVector


class MalformedRequest(ValueError):
    """The request body does not parse as a valid job request (HTTP 400)."""


class SiteUnavailable(Exception):
    """Create refused because the site is outside an availability window
    (HTTP 503); the caller retries later."""


# client-side errors raised by plugin clients
class PluginError(Exception):
    pass


class PluginRejected(PluginError):
    """Definitive 4xx from the plugin; the job cannot run there."""

    def __init__(self, status: int, body: str):
        super().__init__(f"plugin rejected request ({status}): {body}")
        self.status = status
        self.body = body


class PluginUnavailable(PluginError):
    """Transport-level failure; retry with backoff."""


class PluginBusy(PluginUnavailable):
    """The endpoint answered but cannot take work now (503); retry later
    without counting against the node's liveness."""


class BackendJobState(str, enum.Enum):
    PENDING = "pending"
    RUNNING = "running"
    SUCCEEDED = "succeeded"
    FAILED = "failed"

    @property
    def terminal(self) -> bool:
        return self in (BackendJobState.SUCCEEDED, BackendJobState.FAILED)


@dataclass(frozen=True)
class PluginJobRequest:
    job_id: str
    image: str
    command: tuple[str, ...]
    env: Mapping[str, str] = field(default_factory=dict)
    resources: ResourceVector = field(default_factory=ResourceVector)
    secret_bundle: Mapping[str, str] = field(default_factory=dict)  # name -> base64
    timeout_s: int = 3600

    def __post_init__(self):
        object.__setattr__(self, "command", tuple(self.command))
        object.__setattr__(self, "env", dict(self.env))
        object.__setattr__(self, "secret_bundle", dict(self.secret_bundle))

    def to_json_obj(self) -> dict:
        return {
            "job_id": self.job_id,
            "image": self.image,
            "command": list(self.command),
            "env": {k: self.env[k] for k in sorted(self.env)},
            "resources": self.resources.to_json_obj(),
            "secret_bundle": {k: self.secret_bundle[k] for k in sorted(self.secret_bundle)},
            "timeout_s": self.timeout_s,
        }

    @classmethod
    def from_json_obj(cls, obj) -> "PluginJobRequest":
        if not isinstance(obj, dict):
            raise MalformedRequest("request body must be a JSON object")
        job_id = obj.get("job_id")
        if not isinstance(job_id, str) or not job_id:
            raise MalformedRequest("job_id must be a non-empty string")
        command = obj.get("command")
        if not isinstance(command, list) or not all(isinstance(c, str) for c in command):
            raise MalformedRequest("command must be a list of strings")
        if not command:
            raise MalformedRequest("command must be non-empty")
        timeout_s = obj.get("timeout_s", 3600)
        if not isinstance(timeout_s, int) or timeout_s <= 0:
            raise MalformedRequest("timeout_s must be a positive integer")
        bundle = obj.get("secret_bundle") or {}
        if not isinstance(bundle, dict):
            raise MalformedRequest("secret_bundle must be a mapping")
        for name, payload in bundle.items():
            try:
                base64.b64decode(payload, validate=True)
            except (binascii.Error, TypeError, ValueError):
                raise MalformedRequest(f"secret_bundle[{name!r}] is not valid base64")
        try:
            resources = ResourceVector.from_json_obj(obj.get("resources") or {})
        except (TypeError, ValueError) as exc:
            raise MalformedRequest(f"bad resources: {exc}")
        return cls(
            job_id=job_id,
            image=str(obj.get("image", "")),
            command=tuple(command),
            env={str(k): str(v) for k, v in dict(obj.get("env") or {}).items()},
            resources=resources,
            secret_bundle=dict(bundle),
            timeout_s=timeout_s,
        )


@dataclass
class BackendJob:
    """One row of a plugin's job table; exactly one per job_id, ever."""

    job_id: str
    state: BackendJobState
    enqueued_at: float
    started_at: Optional[float] = None
    finished_at: Optional[float] = None
    exit_code: Optional[int] = None

    def status_doc(self) -> dict:
        doc: dict = {"state": self.state.value}
        if self.exit_code is not None:
            doc["exit_code"] = self.exit_code
        if self.started_at is not None:
            doc["started_at"] = rfc3339(self.started_at)
        if self.finished_at is not None:
            doc["finished_at"] = rfc3339(self.finished_at)
        return doc


UNKNOWN_STATUS = {"state": "unknown"}


class PluginBackend(Protocol):
    """What every plugin implementation provides to the protocol layer."""

    site: str

    def create(self, request: PluginJobRequest) -> str: ...

    def status(self, job_id: str) -> dict: ...

    def logs(self, job_id: str, tail: int) -> str: ...

    def delete(self, job_id: str) -> bool: ...

    def ping(self) -> dict: ...
