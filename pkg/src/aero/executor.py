"""Federated function execution.

Functions are arbitrary executables speaking a file contract: the task's
working directory holds ``manifest.json`` on entry and must hold
``result.json`` on success (exit code 0). Anything else is a failure, with
the last 4 KiB of stderr surfaced. The shipped endpoint is a local
subprocess pool with a hard slot limit; the remote HTTP protocol is
documented so a real FaaS adapter can slot in later.
"""

from __future__ import annotations

import json
import logging
import queue
import shlex
import shutil
import subprocess
import threading
import time
from dataclasses import dataclass
from datetime import datetime
from enum import Enum
from pathlib import Path

from .db import Database, dumps, loads
from .errors import (
    EndpointUnavailable,
    FunctionNotAllowed,
    InvalidEntry,
    PollTimeout,
    TaskFailed,
    UnknownEndpoint,
    UnknownFunction,
    UnknownTask,
)
from .model import (
    EndpointKind,
    EndpointRef,
    FunctionManifest,
    FunctionRef,
    PollingPolicy,
    ResultManifest,
    ResultStatus,
    isots,
    new_id,
    parse_ts,
    utcnow,
)

log = logging.getLogger(__name__)

_STDERR_TAIL = 4096


class TaskState(Enum):
    QUEUED = "queued"
    RUNNING = "running"
    DONE = "done"
    FAILED = "failed"


@dataclass(frozen=True)
class TaskHandle:
    task_id: str
    endpoint_id: str


@dataclass
class TaskStatus:
    state: TaskState
    result: ResultManifest | None = None
    message: str | None = None
    proc_started: datetime | None = None
    proc_ended: datetime | None = None


class LocalSubprocessEndpoint:
    """Slot-limited pool of worker threads running one subprocess each.

    Task working directories are disjoint; no task can see another's
    output_dir unless the submitting manifest points there.
    """

    def __init__(self, ref: EndpointRef, work_root: str | Path):
        if ref.slots < 1:
            raise ValueError("endpoint needs at least one slot")
        self.ref = ref
        self.work_root = Path(work_root)
        self.work_root.mkdir(parents=True, exist_ok=True)
        self._queue: queue.Queue = queue.Queue()
        self._tasks: dict[str, TaskStatus] = {}
        self._lock = threading.Lock()
        self._running = 0
        self.peak_running = 0
        self._shutdown = False
        self._workers = [
            threading.Thread(target=self._worker, name=f"endpoint-{ref.endpoint_id[:8]}-{i}", daemon=True)
            for i in range(ref.slots)
        ]
        for w in self._workers:
            w.start()

    def submit(self, function: FunctionRef, manifest: FunctionManifest) -> TaskHandle:
        if self._shutdown:
            raise EndpointUnavailable("endpoint is shut down")
        if self.ref.allowed_functions is not None and function.function_id not in self.ref.allowed_functions:
            raise FunctionNotAllowed(function.function_id)
        for param, path in manifest.inputs.items():
            if not Path(path).is_file():
                raise InvalidEntry(f"input {param!r} path does not exist: {path}")
        task_id = new_id()
        workdir = self.work_root / task_id
        workdir.mkdir(parents=True)
        (workdir / "manifest.json").write_text(json.dumps(manifest.to_json(), indent=2))
        with self._lock:
            self._tasks[task_id] = TaskStatus(state=TaskState.QUEUED)
        self._queue.put((task_id, function, manifest))
        return TaskHandle(task_id=task_id, endpoint_id=self.ref.endpoint_id)

    def poll(self, task_id: str) -> TaskStatus:
        with self._lock:
            status = self._tasks.get(task_id)
        if status is None:
            raise UnknownTask(task_id)
        return status

    def shutdown(self) -> None:
        self._shutdown = True
        for _ in self._workers:
            self._queue.put(None)
        for w in self._workers:
            w.join(timeout=5)

    # -- workers ------------------------------------------------------------------

    def _worker(self) -> None:
        while True:
            item = self._queue.get()
            if item is None:
                return
            task_id, function, manifest = item
            with self._lock:
                self._running += 1
                self.peak_running = max(self.peak_running, self._running)
                self._tasks[task_id] = TaskStatus(state=TaskState.RUNNING, proc_started=utcnow())
            try:
                status = self._execute(task_id, function, manifest)
            except Exception as exc:
                log.exception("task %s crashed in worker", task_id)
                status = TaskStatus(state=TaskState.FAILED, message=str(exc))
            with self._lock:
                self._running -= 1
                started = self._tasks[task_id].proc_started
                status.proc_started = started
                status.proc_ended = utcnow()
                self._tasks[task_id] = status

    def _execute(self, task_id: str, function: FunctionRef, manifest: FunctionManifest) -> TaskStatus:
        workdir = self.work_root / task_id
        argv = shlex.split(function.entry)
        stdout_path = workdir / "stdout.log"
        stderr_path = workdir / "stderr.log"
        with open(stdout_path, "wb") as out, open(stderr_path, "wb") as err:
            proc = subprocess.run(argv, cwd=workdir, stdout=out, stderr=err)
        if proc.returncode != 0:
            tail = stderr_path.read_bytes()[-_STDERR_TAIL:].decode("utf-8", "replace")
            return TaskStatus(
                state=TaskState.FAILED,
                message=f"exit code {proc.returncode}: {tail.strip()}",
            )
        result_path = workdir / "result.json"
        if not result_path.is_file():
            return TaskStatus(state=TaskState.FAILED, message="no result.json produced")
        try:
            manifest_out = ResultManifest.from_json(json.loads(result_path.read_text()))
        except (ValueError, KeyError) as exc:
            return TaskStatus(state=TaskState.FAILED, message=f"invalid result.json: {exc}")
        if manifest_out.status is ResultStatus.OK:
            if not manifest_out.outputs:
                return TaskStatus(state=TaskState.FAILED, message="ok result with no outputs")
            output_root = Path(manifest.output_dir).resolve()
            for output in manifest_out.outputs:
                path = Path(output.path)
                if not path.is_file():
                    return TaskStatus(
                        state=TaskState.FAILED, message=f"output {output.name!r} missing: {output.path}"
                    )
                if not path.resolve().is_relative_to(output_root):
                    return TaskStatus(
                        state=TaskState.FAILED,
                        message=f"output {output.name!r} escapes output_dir: {output.path}",
                    )
        return TaskStatus(state=TaskState.DONE, result=manifest_out)


class ExecutorHub:
    """Function catalog plus the set of live endpoint instances."""

    def __init__(self, db: Database, work_root: str | Path):
        self._db = db
        self.work_root = Path(work_root)
        self._endpoints: dict[str, LocalSubprocessEndpoint] = {}
        self._lock = threading.Lock()

    # -- functions -------------------------------------------------------------

    def register_function(self, entry: str, description: str, principal: str) -> FunctionRef:
        entry = (entry or "").strip()
        if not entry:
            raise InvalidEntry("empty entry")
        program = shlex.split(entry)[0]
        if shutil.which(program) is None and not Path(program).is_file():
            raise InvalidEntry(f"{program!r} does not resolve to an executable")
        ref = FunctionRef(new_id(), entry, description, principal)
        with self._db.transaction() as cur:
            cur.execute(
                "INSERT INTO functions (function_id, entry, description, registered_by, created_at)"
                " VALUES (?, ?, ?, ?, ?)",
                (ref.function_id, entry, description, principal, isots(ref.created_at)),
            )
        return ref

    def get_function(self, function_id: str) -> FunctionRef:
        row = self._db.query_one("SELECT * FROM functions WHERE function_id = ?", (function_id,))
        if row is None:
            raise UnknownFunction(function_id)
        return FunctionRef(
            row["function_id"], row["entry"], row["description"], row["registered_by"],
            parse_ts(row["created_at"]),
        )

    # -- endpoints ---------------------------------------------------------------

    def register_endpoint(
        self,
        kind: EndpointKind,
        principal: str,
        slots: int = 1,
        base_url: str | None = None,
        allowed_functions: set[str] | None = None,
    ) -> EndpointRef:
        ref = EndpointRef(
            endpoint_id=new_id(),
            kind=kind,
            slots=slots,
            base_url=base_url,
            allowed_functions=frozenset(allowed_functions) if allowed_functions is not None else None,
            registered_by=principal,
        )
        with self._db.transaction() as cur:
            cur.execute(
                "INSERT INTO endpoints (endpoint_id, kind, slots, base_url, allowed_functions,"
                " registered_by, created_at) VALUES (?, ?, ?, ?, ?, ?, ?)",
                (
                    ref.endpoint_id,
                    kind.value,
                    slots,
                    base_url,
                    dumps(sorted(allowed_functions)) if allowed_functions is not None else None,
                    principal,
                    isots(ref.created_at),
                ),
            )
        if kind is EndpointKind.LOCAL_SUBPROCESS:
            self._instantiate(ref)
        return ref

    def get_endpoint(self, endpoint_id: str) -> EndpointRef:
        row = self._db.query_one("SELECT * FROM endpoints WHERE endpoint_id = ?", (endpoint_id,))
        if row is None:
            raise UnknownEndpoint(endpoint_id)
        return EndpointRef(
            endpoint_id=row["endpoint_id"],
            kind=EndpointKind(row["kind"]),
            slots=row["slots"],
            base_url=row["base_url"],
            allowed_functions=(
                frozenset(loads(row["allowed_functions"]))
                if row["allowed_functions"] is not None
                else None
            ),
            registered_by=row["registered_by"],
            created_at=parse_ts(row["created_at"]),
        )

    def load(self) -> None:
        """Recreate local endpoint instances for persisted rows."""
        for row in self._db.query("SELECT endpoint_id FROM endpoints WHERE kind = ?",
                                  (EndpointKind.LOCAL_SUBPROCESS.value,)):
            ref = self.get_endpoint(row["endpoint_id"])
            with self._lock:
                if ref.endpoint_id not in self._endpoints:
                    self._instantiate(ref)

    def endpoint_instance(self, endpoint_id: str) -> LocalSubprocessEndpoint:
        with self._lock:
            instance = self._endpoints.get(endpoint_id)
        if instance is None:
            ref = self.get_endpoint(endpoint_id)
            if ref.kind is EndpointKind.REMOTE_HTTP:
                raise EndpointUnavailable("remote endpoints are not served by this build")
            raise EndpointUnavailable(f"endpoint {endpoint_id} is not live")
        return instance

    # -- task lifecycle --------------------------------------------------------------

    def submit(self, endpoint_id: str, function_id: str, manifest: FunctionManifest) -> TaskHandle:
        function = self.get_function(function_id)
        return self.endpoint_instance(endpoint_id).submit(function, manifest)

    def poll(self, handle: TaskHandle) -> TaskStatus:
        return self.endpoint_instance(handle.endpoint_id).poll(handle.task_id)

    def await_completion(
        self,
        handle: TaskHandle,
        policy: PollingPolicy | None = None,
        timeout: float = 3600.0,
        poll_log: list[float] | None = None,
    ) -> ResultManifest:
        """Poll with geometrically growing waits until the task settles.

        ``poll_log`` (when given) records the monotonic timestamp of every
        poll, for observability and latency analysis.
        """
        policy = policy or PollingPolicy()
        deadline = time.monotonic() + timeout
        k = 0
        while True:
            now = time.monotonic()
            if now >= deadline:
                raise PollTimeout(f"task {handle.task_id} still not settled after {timeout}s")
            time.sleep(min(policy.interval(k), max(deadline - now, 0.0)))
            k += 1
            if poll_log is not None:
                poll_log.append(time.monotonic())
            status = self.poll(handle)
            if status.state is TaskState.DONE:
                result = status.result
                if result.status is ResultStatus.ERROR:
                    raise TaskFailed(result.error or "function reported an error")
                if result.task_started is None:
                    result.task_started = status.proc_started
                if result.task_ended is None:
                    result.task_ended = status.proc_ended
                return result
            if status.state is TaskState.FAILED:
                raise TaskFailed(status.message or "task failed")

    def task_status_pair(self, handle: TaskHandle) -> tuple[datetime | None, datetime | None]:
        status = self.poll(handle)
        return status.proc_started, status.proc_ended

    def shutdown(self) -> None:
        with self._lock:
            endpoints = list(self._endpoints.values())
        for ep in endpoints:
            ep.shutdown()

    def _instantiate(self, ref: EndpointRef) -> None:
        self._endpoints[ref.endpoint_id] = LocalSubprocessEndpoint(
            ref, self.work_root / ref.endpoint_id
        )
