import hashlib
import sys
import textwrap
from pathlib import Path

import pytest

from aero.auth import AclStore, AuthStore
from aero.collection_store import CollectionStore
from aero.db import Database
from aero.executor import ExecutorHub
from aero.flows import FlowEngine, FlowRunner
from aero.model import (
    EndpointKind,
    FlowKind,
    InputBinding,
    OutputDecl,
    PollingPolicy,
    RetryPolicy,
    RuleKind,
    TriggerRule,
)
from aero.notify import Notifier
from aero.registry import Registry
from aero.search import SearchIndex
from aero.triggers import TriggerEngine

FAST_RETRY = RetryPolicy(max_attempts=3, base_delay=0.01, factor=2.0, max_delay=0.05)
FAST_POLL = PollingPolicy(initial=0.02, factor=1.5, cap=0.2)


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# Canned user functions (file contract: manifest.json in cwd, result.json out).

COPY_ALL = """\
import json, shutil, os
from datetime import datetime, timezone
started = datetime.now(timezone.utc).isoformat()
m = json.load(open("manifest.json"))
outs = []
for param, path in m["inputs"].items():
    dst = os.path.join(m["output_dir"], param)
    shutil.copyfile(path, dst)
    outs.append({"name": param, "path": dst, "media_type": "application/octet-stream"})
json.dump({"status": "ok", "outputs": outs, "task_started": started,
           "task_ended": datetime.now(timezone.utc).isoformat()}, open("result.json", "w"))
"""

CONCAT = """\
import json, os
m = json.load(open("manifest.json"))
dst = os.path.join(m["output_dir"], "combined")
with open(dst, "wb") as out:
    for param in sorted(m["inputs"]):
        out.write(open(m["inputs"][param], "rb").read())
json.dump({"status": "ok", "outputs": [{"name": "combined", "path": dst}]},
          open("result.json", "w"))
"""

SKIP = """\
import json
json.dump({"status": "skip", "outputs": []}, open("result.json", "w"))
"""

FAIL_EXIT = """\
import sys
sys.stderr.write("validation exploded: bad column\\n")
sys.exit(3)
"""

ERROR_RESULT = """\
import json
json.dump({"status": "error", "error": "domain validation failed"}, open("result.json", "w"))
"""

SLEEPER = """\
import json, os, time
m = json.load(open("manifest.json"))
time.sleep(float(m["kwargs"].get("sleep_s", 1.0)))
dst = os.path.join(m["output_dir"], "data")
open(dst, "wb").write(b"slept")
json.dump({"status": "ok", "outputs": [{"name": "data", "path": dst}]},
          open("result.json", "w"))
"""


class Stack:
    """Fully wired in-process stack (no HTTP listeners): registry, trigger
    engine, executor, flow engine, runner: the same graph the service
    builds, minus the gateway and collection server."""

    def __init__(self, root: Path, retry=FAST_RETRY, polling=FAST_POLL,
                 max_concurrent=8, notifier_url=None):
        self.root = root
        self.db = Database(":memory:")
        self.auth = AuthStore(self.db)
        self.acl = AclStore(self.db)
        self.store = CollectionStore(root / "collections", self.db, self.acl)
        self.search = SearchIndex()
        self.registry = Registry(
            self.db, self.store, self.acl, self.search,
            download_url_builder=lambda cid, key: f"http://collections.test/{cid}/{key}",
        )
        self.hub = ExecutorHub(self.db, root / "tasks")
        self.trigger = TriggerEngine(self.db, asset_exists=self.registry.asset_exists)
        self.notifier = Notifier(self.db, webhook_url=notifier_url)
        self.engine = FlowEngine(
            self.registry, self.store, self.hub, self.notifier,
            run_root=root / "runs", retry_policy=retry, polling_policy=polling,
            task_timeout=60.0,
        )
        self.runner = FlowRunner(self.engine, max_concurrent=max_concurrent)
        self.registry.add_commit_listener(self._on_commit)
        self.registry.add_flow_listener(self._on_flow_event)
        self.owner = self.auth.create_principal("owner").principal_id
        self.collection = self.store.create_collection(self.owner)
        self._scripts = 0

    def _on_commit(self, asset_id, version):
        for dispatch in self.trigger.on_commit(asset_id, version):
            self.runner.submit(dispatch)

    def _on_flow_event(self, event, spec):
        from aero.model import utcnow

        if event == "registered":
            self.trigger.install_flow(spec, utcnow())
        else:
            self.trigger.remove_flow(spec.flow_id)

    # -- helpers ---------------------------------------------------------------

    def script(self, body: str) -> str:
        self._scripts += 1
        path = self.root / f"fn_{self._scripts}.py"
        path.write_text(textwrap.dedent(body))
        return f"{sys.executable} {path}"

    def function(self, body: str) -> str:
        return self.hub.register_function(self.script(body), "test fn", self.owner).function_id

    def endpoint(self, slots: int = 4, allowed=None) -> str:
        return self.hub.register_endpoint(
            EndpointKind.LOCAL_SUBPROCESS, self.owner, slots=slots,
            allowed_functions=allowed,
        ).endpoint_id

    def asset(self, name: str, source_url: str | None = None, tags=frozenset()) -> str:
        return self.registry.create_asset(
            name=name, description=f"{name} asset", tags=set(tags),
            collection_ref=self.collection, source_url=source_url, owner=self.owner,
        )

    def commit_bytes(self, asset_id: str, data: bytes, provenance=None):
        staged = self.store.put_staged(self.collection, [data])
        return self.registry.commit_version(
            asset_id, staged.checksum, staged.size_bytes, "application/octet-stream",
            staged.staged_key, provenance=provenance,
        )

    def analysis_flow(self, function_id, endpoint_id, inputs: dict[str, str],
                      outputs: dict[str, str], rule_kind=RuleKind.ON_ANY_INPUT_UPDATE,
                      kwargs=None, interval=None):
        rule = TriggerRule(rule_kind, interval)
        return self.registry.register_flow(
            kind=FlowKind.ANALYSIS,
            function_ref=function_id,
            endpoint_ref=endpoint_id,
            inputs={p: InputBinding(a) for p, a in inputs.items()},
            outputs={n: OutputDecl(asset_id=a) for n, a in outputs.items()},
            kwargs=kwargs or {},
            rule=rule,
            contact="tests@localhost",
            owner=self.owner,
        )

    def ingestion_flow(self, function_id, endpoint_id, target_asset: str,
                       kwargs=None, interval=3600.0):
        return self.registry.register_flow(
            kind=FlowKind.INGESTION,
            function_ref=function_id,
            endpoint_ref=endpoint_id,
            inputs={},
            outputs={"data": OutputDecl(asset_id=target_asset)},
            kwargs=kwargs or {},
            rule=TriggerRule(RuleKind.PERIODIC, interval),
            contact="tests@localhost",
            owner=self.owner,
        )

    def close(self):
        self.runner.shutdown()
        self.hub.shutdown()
        self.engine.close()
        self.notifier.close()
        self.db.close()


class CaptureServer:
    """Threaded HTTP sink recording every JSON POST body it receives."""

    def __init__(self):
        import json as _json
        import threading
        from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

        outer = self
        self.requests: list[dict] = []

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                body = self.rfile.read(length)
                outer.requests.append(_json.loads(body))
                self.send_response(200)
                self.send_header("Content-Length", "2")
                self.end_headers()
                self.wfile.write(b"{}")

            def log_message(self, *args):
                pass

        class Server(ThreadingHTTPServer):
            daemon_threads = True

        self._httpd = Server(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self._httpd.server_address[1]}/hook"
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)

    def start(self):
        self._thread.start()
        return self

    def stop(self):
        self._httpd.shutdown()
        self._httpd.server_close()


@pytest.fixture
def capture_server():
    server = CaptureServer().start()
    yield server
    server.stop()


@pytest.fixture
def stack(tmp_path):
    s = Stack(tmp_path)
    yield s
    s.close()


@pytest.fixture
def db():
    database = Database(":memory:")
    yield database
    database.close()


@pytest.fixture
def acl(db):
    return AclStore(db)


@pytest.fixture
def auth(db):
    return AuthStore(db)


@pytest.fixture
def store(tmp_path, db, acl):
    return CollectionStore(tmp_path / "collections", db, acl)
