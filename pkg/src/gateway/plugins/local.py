"""Local-process executor plugin.

Runs job commands as real OS processes in per-job scratch directories,
capturing output and exit codes. The image reference is recorded as
metadata only; commands execute on the host. Secrets are materialized as
mode-0600 files under the scratch directory and removed on completion.
"""

from __future__ import annotations

import base64
import logging
import os
import shutil
import signal
import subprocess
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from ..resources import ResourceVector
from .base import BackendJob, BackendJobState, PluginJobRequest, UNKNOWN_STATUS

logger = logging.getLogger(__name__)


@dataclass
class _LocalJob:
    job: BackendJob
    request: PluginJobRequest
    scratch: Path
    log_path: Path
    proc: Optional[subprocess.Popen] = None
    deadline: Optional[float] = None  # monotonic
    secret_paths: list[Path] = field(default_factory=list)


class LocalProcessBackend:
    """Plugin backend executing commands as supervised host processes."""

    def __init__(
        self,
        site: str,
        clock,
        root_dir: Path,
        slots: int = 4,
        capacity: ResourceVector | None = None,
    ):
        self.site = site
        self._clock = clock
        self._root = Path(root_dir)
        self._root.mkdir(parents=True, exist_ok=True)
        self._slots = slots
        self._capacity = capacity or ResourceVector(
            cpu_millicores=slots * 1000, memory_bytes=slots * (2 << 30)
        )
        self._jobs: dict[str, _LocalJob] = {}
        self._pending: list[str] = []
        self._lock = threading.Lock()
        self._reaper: Optional[threading.Thread] = None
        self._stop = threading.Event()

    # -- protocol operations -------------------------------------------

    def create(self, request: PluginJobRequest) -> str:
        with self._lock:
            if request.job_id in self._jobs:
                return self._ref(request.job_id)
            scratch = self._root / request.job_id
            scratch.mkdir(parents=True, exist_ok=True)
            log_path = scratch / "output.log"
            entry = _LocalJob(
                job=BackendJob(
                    job_id=request.job_id,
                    state=BackendJobState.PENDING,
                    enqueued_at=self._clock.now(),
                ),
                request=request,
                scratch=scratch,
                log_path=log_path,
            )
            self._jobs[request.job_id] = entry
            self._pending.append(request.job_id)
            self._pump_locked()
            return self._ref(request.job_id)

    def status(self, job_id: str) -> dict:
        with self._lock:
            self._reap_locked()
            entry = self._jobs.get(job_id)
            if entry is None:
                return dict(UNKNOWN_STATUS)
            return entry.job.status_doc()

    def logs(self, job_id: str, tail: int) -> str:
        with self._lock:
            self._reap_locked()
            entry = self._jobs.get(job_id)
            if entry is None:
                raise KeyError(job_id)
            if tail <= 0 or not entry.log_path.exists():
                return ""
            lines = entry.log_path.read_text(errors="replace").splitlines(keepends=True)
            return "".join(lines[-tail:])

    def delete(self, job_id: str) -> bool:
        with self._lock:
            self._reap_locked()
            entry = self._jobs.get(job_id)
            if entry is None:
                return False
            if entry.job.state is BackendJobState.PENDING:
                if job_id in self._pending:
                    self._pending.remove(job_id)
                entry.job.state = BackendJobState.FAILED
                entry.job.finished_at = self._clock.now()
                self._cleanup_secrets(entry)
            elif entry.job.state is BackendJobState.RUNNING:
                self._terminate(entry)
                self._reap_locked()
            return True

    def ping(self) -> dict:
        with self._lock:
            self._reap_locked()
        return {"site": self.site, "capacity": self._capacity.to_json_obj()}

    # -- process supervision ---------------------------------------------

    def _ref(self, job_id: str) -> str:
        return f"{self.site}:{job_id}"

    def _running_count_locked(self) -> int:
        return sum(
            1 for e in self._jobs.values() if e.job.state is BackendJobState.RUNNING
        )

    def _pump_locked(self) -> None:
        while self._pending and self._running_count_locked() < self._slots:
            job_id = self._pending.pop(0)
            self._spawn_locked(self._jobs[job_id])

    def _spawn_locked(self, entry: _LocalJob) -> None:
        request = entry.request
        secrets_dir = entry.scratch / "secrets"
        if request.secret_bundle:
            secrets_dir.mkdir(exist_ok=True)
            for name in sorted(request.secret_bundle):
                path = secrets_dir / name
                path.write_bytes(base64.b64decode(request.secret_bundle[name]))
                path.chmod(0o600)
                entry.secret_paths.append(path)
        env = dict(os.environ)
        env.update(request.env)
        env["JOB_ID"] = request.job_id
        env["JOB_IMAGE"] = request.image
        log_file = open(entry.log_path, "ab")
        try:
            entry.proc = subprocess.Popen(
                list(request.command),
                cwd=entry.scratch,
                env=env,
                stdout=log_file,
                stderr=subprocess.STDOUT,
                start_new_session=True,
            )
        except OSError as exc:
            log_file.write(f"spawn failed: {exc}\n".encode())
            entry.job.state = BackendJobState.FAILED
            entry.job.started_at = self._clock.now()
            entry.job.finished_at = self._clock.now()
            entry.job.exit_code = 127
            self._cleanup_secrets(entry)
            log_file.close()
            return
        log_file.close()
        entry.job.state = BackendJobState.RUNNING
        entry.job.started_at = self._clock.now()
        entry.deadline = time.monotonic() + request.timeout_s

    def _terminate(self, entry: _LocalJob) -> None:
        if entry.proc is None or entry.proc.poll() is not None:
            return
        try:
            os.killpg(os.getpgid(entry.proc.pid), signal.SIGTERM)
        except (ProcessLookupError, PermissionError):
            entry.proc.terminate()
        try:
            entry.proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            try:
                os.killpg(os.getpgid(entry.proc.pid), signal.SIGKILL)
            except (ProcessLookupError, PermissionError):
                entry.proc.kill()
            entry.proc.wait()

    def _reap_locked(self) -> None:
        for entry in self._jobs.values():
            if entry.job.state is not BackendJobState.RUNNING or entry.proc is None:
                continue
            code = entry.proc.poll()
            if code is None:
                if entry.deadline is not None and time.monotonic() > entry.deadline:
                    logger.info("job %s exceeded timeout; terminating", entry.job.job_id)
                    self._terminate(entry)
                    code = entry.proc.poll()
                else:
                    continue
            # exit codes are reported verbatim, signals as negative values
            entry.job.exit_code = code
            entry.job.finished_at = self._clock.now()
            entry.job.state = (
                BackendJobState.SUCCEEDED if code == 0 else BackendJobState.FAILED
            )
            self._cleanup_secrets(entry)
        self._pump_locked()

    def _cleanup_secrets(self, entry: _LocalJob) -> None:
        for path in entry.secret_paths:
            try:
                path.unlink(missing_ok=True)
            except OSError:
                pass
        entry.secret_paths.clear()

    # -- lifecycle ---------------------------------------------------------

    def wait(self, job_id: str, timeout: float = 30.0) -> dict:
        """Block until the job is terminal (test and demo convenience)."""
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            doc = self.status(job_id)
            if doc.get("state") in ("succeeded", "failed", "unknown"):
                return doc
            time.sleep(0.02)
        return self.status(job_id)

    def start_reaper(self, interval: float = 0.05) -> None:
        """Reap completed children in the background (live mode)."""
        if self._reaper is not None:
            return

        def loop():
            while not self._stop.wait(interval):
                with self._lock:
                    self._reap_locked()

        self._reaper = threading.Thread(target=loop, name=f"reaper-{self.site}", daemon=True)
        self._reaper.start()

    def close(self) -> None:
        self._stop.set()
        if self._reaper is not None:
            self._reaper.join(timeout=2)
            self._reaper = None
        with self._lock:
            for entry in self._jobs.values():
                if entry.job.state is BackendJobState.RUNNING:
                    self._terminate(entry)
            self._reap_locked()

    def job_table(self) -> dict[str, BackendJob]:
        with self._lock:
            return {job_id: e.job for job_id, e in self._jobs.items()}

    def cleanup_scratch(self) -> None:
        shutil.rmtree(self._root, ignore_errors=True)
