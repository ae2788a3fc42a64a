"""The only submission path into the gateway.

Validates group membership and quota model restrictions, overwrites
reserved fields, attaches platform secrets by reference, and supports
cloning a live interactive session into a batch job that reuses the
session's exact runtime specification with a replaced command.
"""

from __future__ import annotations

import base64
import logging
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Optional

from .model import (
    JobRecord,
    SecretRef,
    WorkloadKind,
    WorkloadSpec,
    new_job_record,
    validate_spec,
)
from .resources import ResourceVector

logger = logging.getLogger(__name__)


class SubmissionError(Exception):
    """Base for structured rejections; ``reason`` is wire-safe."""

    code = "rejected"

    def __init__(self, message: str, violations: Optional[list[str]] = None):
        super().__init__(message)
        self.violations = violations or []

    def to_json_obj(self) -> dict:
        obj = {"error": self.code, "message": str(self)}
        if self.violations:
            obj["violations"] = list(self.violations)
        return obj


class NotAMember(SubmissionError):
    code = "not_a_member"


class QuotaModelViolation(SubmissionError):
    code = "quota_model_violation"


class SpecInvalid(SubmissionError):
    code = "spec_invalid"


class OffloadForbidden(SubmissionError):
    code = "offload_forbidden"


class SessionNotFound(SubmissionError):
    code = "session_not_found"


class CloneNotOffloadable(SubmissionError):
    code = "clone_not_offloadable"


class MissingPlatformSecret(Exception):
    """The store lacks a secret the platform configuration requires."""


@dataclass(frozen=True)
class GroupPolicy:
    group: str
    members: frozenset[str]
    quota: ResourceVector
    allowed_gpu_models: frozenset[str]
    offload_allowed: bool = True

    def __post_init__(self):
        object.__setattr__(self, "members", frozenset(self.members))
        object.__setattr__(self, "allowed_gpu_models", frozenset(self.allowed_gpu_models))
        missing = set(self.quota.gpus) - set(self.allowed_gpu_models)
        if missing:
            raise ValueError(
                f"group {self.group!r}: quota lists GPU models {sorted(missing)} "
                "outside allowed_gpu_models"
            )


class SecretStore:
    """Named payloads with a shareable flag; gatekeeper-internal only.

    No method here ever hands payload bytes to a user-facing response.
    ``resolve_shareable`` exists solely for the dispatch path, which
    transmits the bundle to a plugin once and never persists it.
    """

    def __init__(self):
        self._entries: dict[str, tuple[bytes, bool]] = {}
        self._lock = threading.Lock()

    def put(self, name: str, payload: bytes, shareable: bool) -> None:
        with self._lock:
            self._entries[name] = (bytes(payload), shareable)

    def has(self, name: str) -> bool:
        with self._lock:
            return name in self._entries

    def is_shareable(self, name: str) -> bool:
        with self._lock:
            if name not in self._entries:
                raise KeyError(name)
            return self._entries[name][1]

    def ref(self, name: str) -> SecretRef:
        """A payload-free reference suitable for user-visible specs."""
        with self._lock:
            if name not in self._entries:
                raise KeyError(name)
            shareable = self._entries[name][1]
        return SecretRef(name=name, shareable=shareable, payload_ref=f"store://{name}")

    def resolve_shareable(self, names: Iterable[str]) -> dict[str, str]:
        """Base64 payloads for shareable secrets; dispatch-path use only.

        Asking for a non-shareable name is a programming error upstream.
        """
        bundle = {}
        with self._lock:
            for name in names:
                payload, shareable = self._entries[name]
                if not shareable:
                    raise PermissionError(f"secret {name!r} is not shareable")
                bundle[name] = base64.b64encode(payload).decode("ascii")
        return bundle

    @classmethod
    def load_from_directory(cls, directory: Path) -> "SecretStore":
        """Load payloads from files named by secret name.

        A sidecar ``<name>.shareable`` file holding ``true`` or ``false``
        sets the policy class; a missing sidecar means not shareable.
        """
        store = cls()
        directory = Path(directory)
        for entry in sorted(directory.iterdir()):
            if entry.name.endswith(".shareable") or not entry.is_file():
                continue
            sidecar = directory / (entry.name + ".shareable")
            shareable = False
            if sidecar.exists():
                shareable = sidecar.read_text().strip().lower() == "true"
            store.put(entry.name, entry.read_bytes(), shareable)
        return store


@dataclass(frozen=True)
class SessionTemplate:
    session_id: str
    spec: WorkloadSpec
    startup_command: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "startup_command", tuple(self.startup_command))
        if self.spec.kind is not WorkloadKind.INTERACTIVE_SESSION:
            raise ValueError("session template spec must be an interactive session")
        if self.spec.command != self.startup_command:
            raise ValueError("live session command must equal its startup command")


@dataclass
class GatekeeperConfig:
    # names of store secrets every job needs to run in the platform
    platform_secrets: tuple[str, ...] = ()
    # strip non-shareable secrets from offload clones, or reject the clone
    clone_strip_non_shareable: bool = True
    # rewrite reserved spec fields (owner) instead of rejecting mismatches
    rewrite_reserved_fields: bool = True


class Gatekeeper:
    """Validates submissions, manages platform secrets, clones sessions."""

    def __init__(
        self,
        policies: Mapping[str, GroupPolicy],
        secret_store: SecretStore,
        config: GatekeeperConfig | None = None,
        clock=None,
    ):
        self._policies = dict(policies)
        self._store = secret_store
        self._config = config or GatekeeperConfig()
        self._clock = clock
        self._sessions: dict[str, SessionTemplate] = {}
        self._clone_seq: dict[str, int] = {}
        self._lock = threading.Lock()

    @property
    def secret_store(self) -> SecretStore:
        return self._store

    def reload_policies(self, policies: Mapping[str, GroupPolicy]) -> None:
        """Atomic whole-set replacement; in-flight submissions keep the set
        they started with."""
        with self._lock:
            self._policies = dict(policies)

    def _now(self) -> float:
        return self._clock.now() if self._clock else 0.0

    # -- submission ----------------------------------------------------

    def submit(self, spec: WorkloadSpec, submitter: str) -> JobRecord:
        """Validate and accept a workload, returning a Queued record with
        platform secrets attached by reference.

        Reserved fields are overwritten (owner forced to the submitter)
        unless the gatekeeper is configured to reject mismatches instead.
        """
        with self._lock:
            policy = self._policies.get(spec.group)
        if policy is None or submitter not in policy.members:
            raise NotAMember(f"user {submitter!r} is not a member of group {spec.group!r}")

        if self._config.rewrite_reserved_fields:
            spec = replace(spec, owner=submitter)
        elif spec.owner != submitter:
            raise SpecInvalid(f"owner {spec.owner!r} does not match submitter {submitter!r}")

        foreign_models = set(spec.demand.gpus) - set(policy.allowed_gpu_models)
        if foreign_models:
            raise QuotaModelViolation(
                f"demand uses GPU models {sorted(foreign_models)} outside the "
                f"models allowed for group {spec.group!r}"
            )

        violations = validate_spec(spec)
        if violations:
            raise SpecInvalid("workload spec is invalid", violations)

        if spec.offload_compatible and not policy.offload_allowed:
            raise OffloadForbidden(f"group {spec.group!r} may not offload jobs")

        record = new_job_record(spec, self._now())
        return self.inject_platform_secrets(record)

    def inject_platform_secrets(self, job: JobRecord) -> JobRecord:
        """Append the configured platform secret set by reference.

        User references colliding with a platform secret name are replaced
        by the platform's (logged); offload-compatible jobs receive only
        shareable platform secrets. Idempotent. The user-visible
        serialization still carries no payload bytes.
        """
        platform_refs: dict[str, SecretRef] = {}
        for name in self._config.platform_secrets:
            if not self._store.has(name):
                raise MissingPlatformSecret(name)
            ref = self._store.ref(name)
            if job.spec.offload_compatible and not ref.shareable:
                continue
            platform_refs[name] = ref

        merged: list[SecretRef] = []
        for ref in job.spec.secret_refs:
            if ref.name in platform_refs:
                if ref != platform_refs[ref.name]:
                    logger.info(
                        "job %s: user secret %r collides with a platform secret; "
                        "platform reference wins",
                        job.workload_id,
                        ref.name,
                    )
                continue
            merged.append(ref)
        merged.extend(platform_refs[name] for name in self._config.platform_secrets
                      if name in platform_refs)

        new_spec = replace(job.spec, secret_refs=tuple(merged))
        return replace(job, spec=new_spec)

    # -- sessions ------------------------------------------------------

    def register_session(self, template: SessionTemplate) -> None:
        with self._lock:
            self._sessions[template.session_id] = template

    def get_session(self, session_id: str) -> Optional[SessionTemplate]:
        with self._lock:
            return self._sessions.get(session_id)

    def clone_session(
        self,
        session_id: str,
        command: list[str] | tuple[str, ...],
        offload_compatible: bool,
    ) -> WorkloadSpec:
        """Clone a session into a batch spec that runs ``command``.

        The clone keeps the session's image, env, secrets, demand, group
        and owner, so code developed in the session runs identically.
        Offload clones have local-only attributes stripped and must come
        out valid; configuration decides strip-vs-reject for non-shareable
        secrets.
        """
        with self._lock:
            template = self._sessions.get(session_id)
            if template is None:
                raise SessionNotFound(f"no session {session_id!r}")
            self._clone_seq[session_id] = self._clone_seq.get(session_id, 0) + 1
            seq = self._clone_seq[session_id]

        base = template.spec
        clone = replace(
            base,
            workload_id=f"{session_id}-job-{seq}",
            kind=WorkloadKind.BATCH_JOB,
            command=tuple(command),
        )

        if offload_compatible:
            kept = []
            for ref in base.secret_refs:
                if ref.shareable:
                    kept.append(ref)
                    continue
                referenced = any(ref.name == value for value in base.env.values())
                if referenced or not self._config.clone_strip_non_shareable:
                    raise CloneNotOffloadable(
                        f"session secret {ref.name!r} is not shareable"
                    )
                logger.info(
                    "clone of %s: stripped non-shareable secret %r", session_id, ref.name
                )
            clone = replace(
                clone,
                offload_compatible=True,
                uses_local_storage=False,
                secret_refs=tuple(kept),
            )

        violations = validate_spec(clone)
        if violations:
            raise SpecInvalid("cloned spec is invalid", violations)
        return clone


def load_policies(obj: Mapping) -> dict[str, GroupPolicy]:
    """Build group policies from a parsed config mapping."""
    policies = {}
    for group, entry in obj.items():
        policies[group] = GroupPolicy(
            group=group,
            members=frozenset(entry.get("members", [])),
            quota=ResourceVector.from_json_obj(entry.get("quota") or {}),
            allowed_gpu_models=frozenset(entry.get("allowed_gpu_models", [])),
            offload_allowed=bool(entry.get("offload_allowed", True)),
        )
    return policies
