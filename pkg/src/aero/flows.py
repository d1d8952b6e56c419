"""Flow execution: ingestion and analysis runs.

A run is one dispatch of a registered flow. Ingestion runs fetch the
source, short-circuit to Skipped when the content hash is unchanged, and
otherwise push the transformed object through the commit pipeline.
Analysis runs pin their input versions once, stage copies for the user
function, and commit every declared output with a provenance record.

Transient errors retry in place with exponential backoff (the run's
``attempt`` counts body executions); terminal errors, and transient errors
that exhaust the retry budget, notify the flow's contact exactly once.
"""

from __future__ import annotations

import hashlib
import logging
import shutil
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import httpx

from .collection_store import CollectionStore
from .errors import AeroError, FetchFailed, MalformedSource, TaskFailed, UnknownVersion
from .executor import ExecutorHub
from .model import (
    TERMINAL_STATUSES,
    FlowDispatch,
    FlowKind,
    FlowRun,
    FlowSpec,
    FunctionManifest,
    PollingPolicy,
    ResultManifest,
    ResultOutput,
    ResultStatus,
    RetryPolicy,
    RunStatus,
    StepRecord,
    utcnow,
)
from .notify import Notifier
from .registry import ProvenanceInput, Registry

log = logging.getLogger(__name__)

_CHUNK = 1 << 20

DEFAULT_FETCH_SIZE_CAP = 2 << 30


class ErrorClass(Enum):
    TRANSIENT = "transient"
    TERMINAL = "terminal"


_TRANSIENT_CATEGORIES = {
    "network-timeout",
    "endpoint-unavailable",
    "storage-unavailable",
    "executor-queue-full",
}


def classify_error(source_category: str, detail: str = "") -> ErrorClass:
    """Deterministic mapping from an error's source category. Anything not
    recognized as transient is terminal: unknown failures should reach a
    human rather than loop."""
    if source_category in _TRANSIENT_CATEGORIES:
        return ErrorClass.TRANSIENT
    return ErrorClass.TERMINAL


def retry_delay(policy: RetryPolicy, attempt: int) -> float:
    return policy.delay(attempt)


@dataclass
class FetchedObject:
    path: Path
    checksum: str
    size_bytes: int
    media_type: str


class _Step:
    def __init__(self):
        self.outcome = "ok"


class FlowEngine:
    def __init__(
        self,
        registry: Registry,
        store: CollectionStore,
        executor: ExecutorHub,
        notifier: Notifier,
        run_root: str | Path,
        retry_policy: RetryPolicy | None = None,
        polling_policy: PollingPolicy | None = None,
        task_timeout: float = 3600.0,
        fetch_size_cap: int = DEFAULT_FETCH_SIZE_CAP,
        http: httpx.Client | None = None,
    ):
        self.registry = registry
        self.store = store
        self.executor = executor
        self.notifier = notifier
        self.run_root = Path(run_root)
        self.run_root.mkdir(parents=True, exist_ok=True)
        self.retry_policy = retry_policy or RetryPolicy()
        self.polling_policy = polling_policy or PollingPolicy()
        self.task_timeout = task_timeout
        self.fetch_size_cap = fetch_size_cap
        self._http = http or httpx.Client(
            follow_redirects=True, max_redirects=5, timeout=httpx.Timeout(30.0)
        )

    # -- entry points -----------------------------------------------------------

    def execute_dispatch(self, dispatch: FlowDispatch) -> FlowRun:
        flow = self.registry.get_flow(dispatch.flow_id)
        if flow.kind is FlowKind.INGESTION:
            return self.run_ingestion_flow(flow, dispatch.reason)
        return self.run_analysis_flow(flow, dispatch.reason)

    def run_ingestion_flow(self, flow: FlowSpec, dispatch_reason: str) -> FlowRun:
        if flow.kind is not FlowKind.INGESTION:
            raise ValueError("not an ingestion flow")
        return self._run(flow, dispatch_reason, self._ingestion_body)

    def run_analysis_flow(self, flow: FlowSpec, dispatch_reason: str) -> FlowRun:
        if flow.kind is not FlowKind.ANALYSIS:
            raise ValueError("not an analysis flow")
        return self._run(flow, dispatch_reason, self._analysis_body)

    # -- retry shell ---------------------------------------------------------------

    def _run(self, flow: FlowSpec, reason: str, body) -> FlowRun:
        run = self.registry.create_run(flow.flow_id, reason)
        run_dir = self.run_root / run.run_id
        error_message = ""
        try:
            attempt = 1
            while True:
                run.attempt = attempt
                self._reset_run_dir(run_dir)
                try:
                    body(flow, run, run_dir)
                    break
                except Exception as exc:
                    eclass, error_message = self._describe(exc)
                    if eclass is ErrorClass.TRANSIENT and attempt < self.retry_policy.max_attempts:
                        log.warning(
                            "flow %s attempt %d failed transiently (%s); retrying",
                            flow.flow_id, attempt, error_message,
                        )
                        time.sleep(retry_delay(self.retry_policy, attempt))
                        attempt += 1
                        continue
                    run.status = (
                        RunStatus.FAILED_TRANSIENT
                        if eclass is ErrorClass.TRANSIENT
                        else RunStatus.FAILED_TERMINAL
                    )
                    run.error_class = eclass.value
                    run.error_message = error_message
                    break
        finally:
            shutil.rmtree(run_dir, ignore_errors=True)
            run.ended_at = utcnow()
            self.registry.save_run(run)
        if run.status in (RunStatus.FAILED_TERMINAL, RunStatus.FAILED_TRANSIENT):
            # Exhausted retries escalate like terminal failures; silently
            # dropping them would strand the flow owner.
            self.notifier.notify_terminal(flow, run, error_message)
        return run

    # -- flow bodies -------------------------------------------------------------------

    def _ingestion_body(self, flow: FlowSpec, run: FlowRun, run_dir: Path) -> None:
        output_name, decl = next(iter(flow.outputs.items()))
        asset = self.registry.get_asset(decl.asset_id)
        if not asset.source_url:
            raise MalformedSource(f"asset {asset.asset_id} has no source_url")

        self._set_status(run, RunStatus.FETCHING)
        with self._step(run, "fetch"):
            fetched = self._fetch(asset.source_url, run_dir / "download")

        latest = self.registry.latest_version(asset.asset_id)
        if latest is not None and latest.checksum == fetched.checksum:
            with self._step(run, "dedup-check") as step:
                step.outcome = "unchanged"
            self.registry.touch_last_polled(asset.asset_id)
            self._set_status(run, RunStatus.SKIPPED)
            return
        with self._step(run, "dedup-check") as step:
            step.outcome = "changed" if latest is not None else "first-version"

        result = self._execute_function(flow, run, run_dir, inputs={"data": str(fetched.path)})
        if result.status is ResultStatus.SKIP:
            self._set_status(run, RunStatus.SKIPPED)
            return
        matched = self._match_outputs(result, flow)

        self._set_status(run, RunStatus.COMMITTING)
        with self._step(run, "commit"):
            out = matched[output_name]
            staged = self.store.put_staged_from_path(asset.collection_ref, out.path)
            media_type = out.media_type or fetched.media_type
            committed = self.registry.commit_version(
                asset.asset_id,
                staged.checksum,
                staged.size_bytes,
                media_type,
                staged.staged_key,
            )
            run.produced_outputs[output_name] = (asset.asset_id, committed.version)
        self._set_status(run, RunStatus.SUCCEEDED)

    def _analysis_body(self, flow: FlowSpec, run: FlowRun, run_dir: Path) -> None:
        self._set_status(run, RunStatus.FETCHING)
        with self._step(run, "resolve-inputs"):
            if not run.resolved_inputs:
                # Latest bindings resolve exactly once per run; retries and
                # mid-run commits must not shift the pins.
                run.resolved_inputs = self._resolve_inputs(flow)
            staged_inputs = self._stage_inputs(flow, run, run_dir)

        result = self._execute_function(flow, run, run_dir, inputs=staged_inputs)
        if result.status is ResultStatus.SKIP:
            self._set_status(run, RunStatus.SKIPPED)
            return
        matched = self._match_outputs(result, flow)

        self._set_status(run, RunStatus.COMMITTING)
        with self._step(run, "commit"):
            provenance_inputs = sorted(run.resolved_inputs.values())
            for name in sorted(flow.outputs):
                decl = flow.outputs[name]
                target = self.registry.get_asset(decl.asset_id)
                out = matched[name]
                staged = self.store.put_staged_from_path(target.collection_ref, out.path)
                committed = self.registry.commit_version(
                    target.asset_id,
                    staged.checksum,
                    staged.size_bytes,
                    out.media_type or "application/octet-stream",
                    staged.staged_key,
                    provenance=ProvenanceInput(run.run_id, flow.function_ref, provenance_inputs),
                )
                run.produced_outputs[name] = (target.asset_id, committed.version)
        self._set_status(run, RunStatus.SUCCEEDED)

    # -- shared pieces ---------------------------------------------------------------------

    def _resolve_inputs(self, flow: FlowSpec) -> dict[str, tuple[str, int]]:
        resolved = {}
        for param in sorted(flow.inputs):
            binding = flow.inputs[param]
            if binding.selector.is_latest:
                latest = self.registry.latest_version(binding.asset_id)
                if latest is None:
                    raise UnknownVersion(f"input {param!r}: {binding.asset_id} has no versions")
                resolved[param] = (binding.asset_id, latest.version)
            else:
                pinned = binding.selector.pinned
                meta = [v for v in self.registry.list_versions(binding.asset_id) if v.version == pinned]
                if not meta:
                    raise UnknownVersion(f"input {param!r}: {binding.asset_id}@{pinned}")
                resolved[param] = (binding.asset_id, pinned)
        return resolved

    def _stage_inputs(self, flow: FlowSpec, run: FlowRun, run_dir: Path) -> dict[str, str]:
        inputs_dir = run_dir / "inputs"
        inputs_dir.mkdir(exist_ok=True)
        staged = {}
        for param, (asset_id, version) in run.resolved_inputs.items():
            asset = self.registry.get_asset(asset_id)
            dv = [v for v in self.registry.list_versions(asset_id) if v.version == version]
            if not dv:
                raise UnknownVersion(f"{asset_id}@{version}")
            dest = inputs_dir / param
            self.store.export_object(asset.collection_ref, dv[0].storage_key, dest)
            staged[param] = str(dest)
        return staged

    def _execute_function(
        self, flow: FlowSpec, run: FlowRun, run_dir: Path, inputs: dict[str, str]
    ) -> ResultManifest:
        self._set_status(run, RunStatus.EXECUTING)
        output_dir = run_dir / "outputs"
        output_dir.mkdir(exist_ok=True)
        manifest = FunctionManifest(
            run_id=run.run_id,
            inputs=inputs,
            kwargs=flow.kwargs,
            output_dir=str(output_dir),
            contact=flow.contact,
        )
        with self._step(run, "execute"):
            handle = self.executor.submit(flow.endpoint_ref, flow.function_ref, manifest)
            result = self.executor.await_completion(
                handle, self.polling_policy, timeout=self.task_timeout
            )
            run.task_started = result.task_started
            run.task_ended = result.task_ended
        return result

    @staticmethod
    def _match_outputs(result: ResultManifest, flow: FlowSpec) -> dict[str, ResultOutput]:
        """Exact name matching between the result manifest and the flow's
        declared outputs; extras and omissions are both terminal."""
        produced = {o.name: o for o in result.outputs}
        declared = set(flow.outputs)
        extra = set(produced) - declared
        if extra:
            raise TaskFailed(f"function produced undeclared outputs: {sorted(extra)}")
        missing = declared - set(produced)
        if missing:
            raise TaskFailed(f"function omitted declared outputs: {sorted(missing)}")
        return produced

    def _fetch(self, url: str, dest: Path) -> FetchedObject:
        digest = hashlib.sha256()
        size = 0
        try:
            with self._http.stream("GET", url) as response:
                if response.status_code >= 500:
                    raise FetchFailed(f"source returned {response.status_code}")
                if response.status_code >= 400:
                    raise MalformedSource(f"source returned {response.status_code}")
                media_type = (
                    response.headers.get("content-type", "application/octet-stream")
                    .split(";")[0]
                    .strip()
                    or "application/octet-stream"
                )
                with open(dest, "wb") as f:
                    for chunk in response.iter_bytes(_CHUNK):
                        size += len(chunk)
                        if size > self.fetch_size_cap:
                            raise MalformedSource(f"source exceeds size cap ({self.fetch_size_cap} bytes)")
                        digest.update(chunk)
                        f.write(chunk)
        except httpx.TooManyRedirects as exc:
            raise MalformedSource(f"too many redirects fetching {url}") from exc
        except httpx.HTTPError as exc:
            raise FetchFailed(f"fetch failed: {exc}") from exc
        return FetchedObject(path=dest, checksum=digest.hexdigest(), size_bytes=size, media_type=media_type)

    def _set_status(self, run: FlowRun, status: RunStatus) -> None:
        run.status = status
        # Terminal statuses are persisted once by the finalizer, together
        # with ended_at, so observers never see a finished run without an
        # end time.
        if status not in TERMINAL_STATUSES:
            self.registry.save_run(run)

    @contextmanager
    def _step(self, run: FlowRun, name: str):
        step = _Step()
        started = utcnow()
        try:
            yield step
        except Exception as exc:
            run.step_records.append(StepRecord(name, started, utcnow(), f"error: {exc}"))
            self.registry.save_run(run)
            raise
        run.step_records.append(StepRecord(name, started, utcnow(), step.outcome))
        self.registry.save_run(run)

    @staticmethod
    def _describe(exc: Exception) -> tuple[ErrorClass, str]:
        if isinstance(exc, AeroError):
            return classify_error(exc.category), exc.message
        return ErrorClass.TERMINAL, f"{type(exc).__name__}: {exc}"

    @staticmethod
    def _reset_run_dir(run_dir: Path) -> None:
        shutil.rmtree(run_dir, ignore_errors=True)
        run_dir.mkdir(parents=True)

    def close(self) -> None:
        self._http.close()


class FlowRunner:
    """Bounded-concurrency dispatcher enforcing the per-flow policy: at most
    one active run plus at most one queued re-dispatch."""

    def __init__(self, engine: FlowEngine, max_concurrent: int = 32):
        self._engine = engine
        self._pool = ThreadPoolExecutor(max_workers=max_concurrent, thread_name_prefix="flow")
        self._lock = threading.Lock()
        self._idle = threading.Condition(self._lock)
        self._active: set[str] = set()
        self._queued: dict[str, FlowDispatch] = {}
        self._closed = False

    def submit(self, dispatch: FlowDispatch) -> bool:
        """Accept a dispatch; returns False when dropped because the flow
        already has a queued re-dispatch."""
        with self._lock:
            if self._closed:
                return False
            if dispatch.flow_id in self._active:
                if dispatch.flow_id in self._queued:
                    return False
                self._queued[dispatch.flow_id] = dispatch
                return True
            self._active.add(dispatch.flow_id)
        self._pool.submit(self._run, dispatch)
        return True

    def _run(self, dispatch: FlowDispatch) -> None:
        try:
            self._engine.execute_dispatch(dispatch)
        except Exception:
            log.exception("dispatch of flow %s crashed", dispatch.flow_id)
        finally:
            with self._lock:
                queued = self._queued.pop(dispatch.flow_id, None)
                if queued is None:
                    self._active.discard(dispatch.flow_id)
                    self._idle.notify_all()
            if queued is not None:
                try:
                    self._pool.submit(self._run, queued)
                except RuntimeError:  # pool already shut down
                    with self._lock:
                        self._active.discard(dispatch.flow_id)
                        self._idle.notify_all()

    def active_count(self) -> int:
        with self._lock:
            return len(self._active)

    def drain(self, timeout: float = 60.0) -> bool:
        """Wait until no flow is active or queued."""
        deadline = time.monotonic() + timeout
        with self._lock:
            while self._active or self._queued:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return False
                self._idle.wait(remaining)
        return True

    def shutdown(self, wait: bool = True) -> None:
        with self._lock:
            self._closed = True
        self._pool.shutdown(wait=wait, cancel_futures=True)
