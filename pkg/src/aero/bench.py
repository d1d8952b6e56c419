"""Synthetic concurrency benchmark.

Drives N no-op ingestion flows at once against a locally served random
binary source and measures the batch makespan (max flow end minus min flow
start) over repeated runs. Each flow targets a fresh asset so content
dedup never short-circuits, and each registration carries a distinct
random kwarg so flow dedup does not reject the batch.

By default every repetition runs against a fresh embedded service
(exercised over real loopback HTTP); pass ``server_url`` to benchmark an
already-running deployment instead.
"""

from __future__ import annotations

import json
import random
import shutil
import statistics
import sys
import tempfile
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any, Callable

from .client import AeroClient
from .errors import EndpointTooSmall
from .model import isots, parse_ts, utcnow

DEFAULT_SIZE_BYTES = 61_680_000
DEFAULT_SEED = 1137

_POLL_SWEEP_S = 0.25
_REP_TIMEOUT_S = 600.0

NOOP_TRANSFORM = """\
import json
import os
from datetime import datetime, timezone


def _now():
    return datetime.now(timezone.utc).isoformat()


started = _now()
with open("manifest.json") as f:
    manifest = json.load(f)
src = manifest["inputs"]["data"]
dst = os.path.join(manifest["output_dir"], "data")
os.rename(src, dst)
with open("result.json", "w") as f:
    json.dump({
        "status": "ok",
        "outputs": [{"name": "data", "path": dst,
                     "media_type": "application/octet-stream"}],
        "task_started": started,
        "task_ended": _now(),
    }, f)
"""


class StaticSourceServer:
    """Threaded HTTP server handing out one in-memory payload."""

    def __init__(self, payload: bytes, host: str = "127.0.0.1", port: int = 0):
        self.payload = payload
        outer = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def do_GET(self):
                self.send_response(200)
                self.send_header("Content-Type", "application/octet-stream")
                self.send_header("Content-Length", str(len(outer.payload)))
                self.end_headers()
                self.wfile.write(outer.payload)

            def log_message(self, *args):
                pass

        class Server(ThreadingHTTPServer):
            daemon_threads = True

        self._httpd = Server((host, port), Handler)
        self.host, self.port = self._httpd.server_address[:2]
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True,
                                        name="bench-source")

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}/data"

    def start(self) -> None:
        self._thread.start()

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()


@dataclass
class BenchConfig:
    concurrencies: list[int]
    repetitions: int = 5
    size_bytes: int = DEFAULT_SIZE_BYTES
    slots: int = 32
    seed: int = DEFAULT_SEED
    server_url: str | None = None
    token: str | None = None

    def __post_init__(self):
        if not self.concurrencies:
            raise ValueError("at least one concurrency level required")
        if any(n < 1 for n in self.concurrencies):
            raise ValueError("concurrency levels must be >= 1")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.slots < max(self.concurrencies):
            raise EndpointTooSmall(
                f"endpoint has {self.slots} slots, need >= {max(self.concurrencies)}"
            )


@dataclass
class FlowSample:
    flow_id: str
    run_id: str
    status: str
    started_at: str
    ended_at: str
    duration_s: float
    task_started: str | None
    task_ended: str | None
    version: int | None
    steps: list[dict]

    def to_json(self) -> dict[str, Any]:
        return self.__dict__.copy()


@dataclass
class RepSample:
    concurrency: int
    rep: int
    makespan_s: float
    flows: list[FlowSample]

    def to_json(self) -> dict[str, Any]:
        return {
            "concurrency": self.concurrency,
            "rep": self.rep,
            "makespan_s": self.makespan_s,
            "flows": [f.to_json() for f in self.flows],
        }


@dataclass
class BenchRow:
    concurrency: int
    makespans_s: list[float]

    @property
    def median_s(self) -> float:
        return statistics.median(self.makespans_s)

    @property
    def min_s(self) -> float:
        return min(self.makespans_s)

    @property
    def max_s(self) -> float:
        return max(self.makespans_s)

    def to_json(self) -> dict[str, Any]:
        return {
            "concurrency": self.concurrency,
            "makespans_s": self.makespans_s,
            "median_s": self.median_s,
            "min_s": self.min_s,
            "max_s": self.max_s,
        }


@dataclass
class BenchReport:
    generated_at: str
    seed: int
    size_bytes: int
    slots: int
    repetitions: int
    executor: str = "local_subprocess"
    rows: list[BenchRow] = field(default_factory=list)
    samples: list[RepSample] = field(default_factory=list)
    violations: list[str] = field(default_factory=list)

    def row_for(self, concurrency: int) -> BenchRow:
        for row in self.rows:
            if row.concurrency == concurrency:
                return row
        raise KeyError(concurrency)

    def to_json(self) -> dict[str, Any]:
        return {
            "generated_at": self.generated_at,
            "seed": self.seed,
            "size_bytes": self.size_bytes,
            "slots": self.slots,
            "repetitions": self.repetitions,
            "executor": self.executor,
            "rows": [row.to_json() for row in self.rows],
            "samples": [sample.to_json() for sample in self.samples],
            "violations": self.violations,
        }

    def gnuplot_table(self) -> str:
        lines = ["# concurrency median_s min_s max_s"]
        for row in self.rows:
            lines.append(f"{row.concurrency} {row.median_s:.4f} {row.min_s:.4f} {row.max_s:.4f}")
        return "\n".join(lines) + "\n"

    def write(self, out_path: str | Path) -> None:
        out = Path(out_path)
        out.write_text(json.dumps(self.to_json(), indent=2) + "\n")
        out.with_suffix(".dat").write_text(self.gnuplot_table())


def run_bench(cfg: BenchConfig, progress: Callable[[str], None] | None = None) -> BenchReport:
    """Run the full sweep and return the report."""
    import hashlib

    say = progress or (lambda msg: None)
    payload = random.Random(cfg.seed).randbytes(cfg.size_bytes)
    payload_checksum = hashlib.sha256(payload).hexdigest()
    source = StaticSourceServer(payload)
    source.start()
    script_dir = Path(tempfile.mkdtemp(prefix="aero-bench-fn-"))
    script_path = script_dir / "noop_transform.py"
    script_path.write_text(NOOP_TRANSFORM)

    report = BenchReport(
        generated_at=isots(utcnow()),
        seed=cfg.seed,
        size_bytes=cfg.size_bytes,
        slots=cfg.slots,
        repetitions=cfg.repetitions,
    )
    try:
        for concurrency in cfg.concurrencies:
            row = BenchRow(concurrency=concurrency, makespans_s=[])
            for rep in range(cfg.repetitions):
                say(f"concurrency={concurrency} rep={rep + 1}/{cfg.repetitions} ...")
                sample = _run_rep(cfg, source.url, script_path, concurrency, rep,
                                  report.violations, payload_checksum)
                row.makespans_s.append(sample.makespan_s)
                report.samples.append(sample)
                say(f"concurrency={concurrency} rep={rep + 1}: makespan {sample.makespan_s:.2f}s")
            report.rows.append(row)
    finally:
        source.stop()
        shutil.rmtree(script_dir, ignore_errors=True)
    return report


def _run_rep(
    cfg: BenchConfig,
    source_url: str,
    script_path: Path,
    concurrency: int,
    rep: int,
    violations: list[str],
    payload_checksum: str,
) -> RepSample:
    if cfg.server_url is not None:
        client = AeroClient(cfg.server_url, token=cfg.token)
        try:
            return _drive_batch(client, cfg, source_url, script_path, concurrency, rep,
                                violations, payload_checksum)
        finally:
            client.close()

    from .service import AeroService, Config

    state_dir = Path(tempfile.mkdtemp(prefix="aero-bench-state-"))
    service = AeroService(Config(
        state_dir=state_dir,
        bind="127.0.0.1:0",
        collection_bind="127.0.0.1:0",
        max_concurrent_flows=max(32, concurrency),
    ))
    service.start()
    try:
        client = AeroClient(service.gateway_url, token=service.admin_token)
        try:
            return _drive_batch(client, cfg, source_url, script_path, concurrency, rep,
                                violations, payload_checksum)
        finally:
            client.close()
    finally:
        service.stop()
        shutil.rmtree(state_dir, ignore_errors=True)


def _drive_batch(
    client: AeroClient,
    cfg: BenchConfig,
    source_url: str,
    script_path: Path,
    concurrency: int,
    rep: int,
    violations: list[str],
    payload_checksum: str,
) -> RepSample:
    rng = random.Random(f"{cfg.seed}:{concurrency}:{rep}")
    collection_id = client.create_collection()["collection_id"]
    function_id = client.register_function(
        f"{sys.executable} {script_path}", "no-op transform (rename input to output)"
    )
    endpoint_id = client.register_endpoint(slots=cfg.slots)

    flow_ids = []
    assets_by_flow: dict[str, str] = {}
    for i in range(concurrency):
        asset_id = client.create_asset(
            name=f"bench-src-c{concurrency}-r{rep}-{i}",
            collection_ref=collection_id,
            description="synthetic benchmark source",
            tags=["bench"],
            source_url=source_url,
        )
        flow = client.register_flow({
            "kind": "ingestion",
            "function_ref": function_id,
            "endpoint_ref": endpoint_id,
            "inputs": {},
            "outputs": {"data": {"asset_id": asset_id}},
            "kwargs": {"nonce": rng.random()},
            "rule": {"kind": "periodic", "interval_s": 3600},
            "contact": "bench@localhost",
        })
        flow_ids.append(flow["flow_id"])
        assets_by_flow[flow["flow_id"]] = asset_id

    # Fire all flows at once.
    barrier = threading.Barrier(concurrency)
    errors: list[str] = []

    def _dispatch(flow_id: str) -> None:
        barrier.wait()
        try:
            client.dispatch_flow(flow_id)
        except Exception as exc:
            errors.append(f"dispatch {flow_id}: {exc}")

    threads = [threading.Thread(target=_dispatch, args=(fid,)) for fid in flow_ids]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise RuntimeError("; ".join(errors))

    terminal = _await_terminal_runs(client, flow_ids)

    flows = []
    starts, ends = [], []
    for flow_id in flow_ids:
        run = terminal[flow_id]
        started = parse_ts(run["started_at"])
        ended = parse_ts(run["ended_at"])
        starts.append(started)
        ends.append(ended)
        version = None
        outputs = run.get("produced_outputs") or {}
        if "data" in outputs:
            version = outputs["data"][1]
        flows.append(FlowSample(
            flow_id=flow_id,
            run_id=run["run_id"],
            status=run["status"],
            started_at=run["started_at"],
            ended_at=run["ended_at"],
            duration_s=(ended - started).total_seconds(),
            task_started=run.get("task_started"),
            task_ended=run.get("task_ended"),
            version=version,
            steps=run.get("step_records", []),
        ))
        label = f"c{concurrency} rep{rep} flow {flow_id}"
        if run["status"] != "succeeded":
            violations.append(f"{label}: status {run['status']} ({run.get('error_message')})")
        elif version != 1:
            violations.append(f"{label}: produced version {version}, expected fresh version 1")
        else:
            meta = client.get_version(assets_by_flow[flow_id], "latest")
            if meta["checksum"] != payload_checksum:
                violations.append(f"{label}: committed checksum differs from the source payload")
            if meta["size_bytes"] != cfg.size_bytes:
                violations.append(f"{label}: committed size {meta['size_bytes']} != {cfg.size_bytes}")

    makespan = (max(ends) - min(starts)).total_seconds()
    sample = RepSample(concurrency=concurrency, rep=rep, makespan_s=makespan, flows=flows)
    for flow in flows:
        if flow.duration_s > makespan + 1e-9:
            violations.append(
                f"c{concurrency} rep{rep} flow {flow.flow_id}: duration exceeds makespan"
            )
        if flow.task_started and flow.task_ended:
            task_s = (parse_ts(flow.task_ended) - parse_ts(flow.task_started)).total_seconds()
            execute = [s for s in flow.steps if s["name"] == "execute"]
            if execute:
                step_s = (
                    parse_ts(execute[0]["ended_at"]) - parse_ts(execute[0]["started_at"])
                ).total_seconds()
                if step_s + 1e-9 < task_s:
                    violations.append(
                        f"c{concurrency} rep{rep} flow {flow.flow_id}: "
                        f"execute step ({step_s:.3f}s) shorter than task ({task_s:.3f}s)"
                    )
    return sample


def _await_terminal_runs(client: AeroClient, flow_ids: list[str]) -> dict[str, dict]:
    """Poll run lists until every flow has one terminal run."""
    terminal_states = {"succeeded", "skipped", "failed_transient", "failed_terminal"}
    deadline = time.monotonic() + _REP_TIMEOUT_S
    done: dict[str, dict] = {}
    while len(done) < len(flow_ids):
        if time.monotonic() > deadline:
            missing = [f for f in flow_ids if f not in done]
            raise TimeoutError(f"flows never finished: {missing}")
        for flow_id in flow_ids:
            if flow_id in done:
                continue
            for run in client.list_runs(flow_id):
                if run["status"] in terminal_states and run["ended_at"] is not None:
                    done[flow_id] = run
                    break
        if len(done) < len(flow_ids):
            time.sleep(_POLL_SWEEP_S)
    return done
