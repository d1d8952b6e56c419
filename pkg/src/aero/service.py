"""Service wiring: configuration, component graph, and background loops.

One AeroService owns the durable store, both HTTP listeners (API gateway
and collection server, deliberately on distinct ports), the trigger loop,
and the flow runner. Construction binds sockets but starts nothing;
``start()``/``stop()`` manage the threads, so tests can run an embedded
instance per case.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import uvicorn

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:
    import tomli as tomllib

from .auth import AclStore, AuthStore
from .collection_server import CollectionServer
from .collection_store import CollectionStore
from .db import Database
from .executor import ExecutorHub
from .flows import FlowEngine, FlowRunner
from .gateway import create_app
from .model import FlowSpec, PollingPolicy, RetryPolicy, utcnow
from .notify import Notifier
from .registry import Registry
from .search import SearchIndex
from .triggers import TriggerEngine

log = logging.getLogger(__name__)

_GC_EVERY_TICKS = 240


def _parse_bind(value: str) -> tuple[str, int]:
    host, _, port = value.rpartition(":")
    return host or "127.0.0.1", int(port)


@dataclass
class Config:
    state_dir: Path = Path("state")
    bind: str = "127.0.0.1:8600"
    collection_bind: str = "127.0.0.1:8610"
    notifier_url: str | None = None
    max_concurrent_flows: int = 32
    tick_interval_s: float = 0.25
    task_timeout_s: float = 3600.0
    fetch_size_cap: int = 2 << 30
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    polling: PollingPolicy = field(default_factory=PollingPolicy)

    @classmethod
    def load(cls, path: str | Path | None = None, env: dict | None = None) -> "Config":
        """TOML file (optional) with environment overrides on top."""
        env = os.environ if env is None else env
        raw: dict = {}
        if path is not None:
            with open(path, "rb") as f:
                raw = tomllib.load(f)
        cfg = cls(
            state_dir=Path(raw.get("state_dir", "state")),
            bind=raw.get("bind", "127.0.0.1:8600"),
            collection_bind=raw.get("collection_bind", "127.0.0.1:8610"),
            notifier_url=raw.get("notifier_url"),
            max_concurrent_flows=int(raw.get("max_concurrent_flows", 32)),
            tick_interval_s=float(raw.get("tick_interval_s", 0.25)),
            task_timeout_s=float(raw.get("task_timeout_s", 3600.0)),
            fetch_size_cap=int(raw.get("fetch_size_cap", 2 << 30)),
            retry=RetryPolicy(**raw.get("retry", {})),
            polling=PollingPolicy(**raw.get("polling", {})),
        )
        if env.get("AERO_STATE_DIR"):
            cfg.state_dir = Path(env["AERO_STATE_DIR"])
        if env.get("AERO_BIND"):
            cfg.bind = env["AERO_BIND"]
        if env.get("AERO_COLLECTION_BIND"):
            cfg.collection_bind = env["AERO_COLLECTION_BIND"]
        if env.get("AERO_NOTIFIER_URL"):
            cfg.notifier_url = env["AERO_NOTIFIER_URL"]
        return cfg


class AeroService:
    def __init__(self, config: Config):
        self.config = config
        state = Path(config.state_dir)
        state.mkdir(parents=True, exist_ok=True)

        self.db = Database(state / "registry.db")
        self.auth = AuthStore(self.db)
        self.acl = AclStore(self.db)
        self.store = CollectionStore(state / "collections", self.db, self.acl)
        self.search = SearchIndex()
        self.hub = ExecutorHub(self.db, state / "tasks")

        chost, cport = _parse_bind(config.collection_bind)
        self.collection_server = CollectionServer(self.store, self.auth, self.db, chost, cport)

        self.registry = Registry(
            self.db,
            self.store,
            self.acl,
            self.search,
            download_url_builder=self.collection_server.download_url,
        )
        self.trigger = TriggerEngine(self.db, asset_exists=self.registry.asset_exists)
        self.notifier = Notifier(self.db, webhook_url=config.notifier_url)
        self.engine = FlowEngine(
            self.registry,
            self.store,
            self.hub,
            self.notifier,
            run_root=state / "runs",
            retry_policy=config.retry,
            polling_policy=config.polling,
            task_timeout=config.task_timeout_s,
            fetch_size_cap=config.fetch_size_cap,
        )
        self.runner = FlowRunner(self.engine, max_concurrent=config.max_concurrent_flows)

        self.registry.add_commit_listener(self._on_commit)
        self.registry.add_flow_listener(self._on_flow_event)

        self._bootstrap(state)

        self.app = create_app(self)
        ghost, gport = _parse_bind(config.bind)
        self._uvicorn = uvicorn.Server(
            uvicorn.Config(self.app, host=ghost, port=gport, log_level="warning",
                           lifespan="off", access_log=False)
        )
        self._gateway_thread: threading.Thread | None = None
        self._tick_thread: threading.Thread | None = None
        self._stop = threading.Event()
        self.gateway_host = ghost
        self.gateway_port = gport

    # -- lifecycle ------------------------------------------------------------

    def start(self) -> None:
        self.collection_server.start()
        self.hub.load()
        self.trigger.load(self.registry.list_flows(), utcnow())
        self.registry.rebuild_search_index()

        self._gateway_thread = threading.Thread(
            target=self._uvicorn.run, daemon=True, name="gateway"
        )
        self._gateway_thread.start()
        deadline = time.monotonic() + 10
        while not self._uvicorn.started:
            if time.monotonic() > deadline:
                raise RuntimeError("gateway failed to start")
            time.sleep(0.01)
        sock = self._uvicorn.servers[0].sockets[0]
        self.gateway_host, self.gateway_port = sock.getsockname()[:2]

        self._tick_thread = threading.Thread(target=self._tick_loop, daemon=True, name="trigger-loop")
        self._tick_thread.start()
        log.info(
            "service up: gateway %s collection-server %s",
            self.gateway_url, self.collection_server.base_url,
        )

    def stop(self) -> None:
        self._stop.set()
        if self._tick_thread:
            self._tick_thread.join(timeout=5)
        self.runner.shutdown(wait=True)
        self.hub.shutdown()
        self._uvicorn.should_exit = True
        if self._gateway_thread:
            self._gateway_thread.join(timeout=5)
        self.collection_server.stop()
        self.engine.close()
        self.notifier.close()
        self.db.close()

    def wait(self) -> None:
        """Block until stop() is called elsewhere (serve mode)."""
        while not self._stop.is_set():
            time.sleep(0.5)

    def drain(self, timeout: float = 60.0) -> bool:
        return self.runner.drain(timeout)

    # -- addresses and identity -------------------------------------------------

    @property
    def gateway_url(self) -> str:
        return f"http://{self.gateway_host}:{self.gateway_port}"

    def collection_base_url(self) -> str:
        return self.collection_server.base_url

    @property
    def admin_token(self) -> str:
        return (Path(self.config.state_dir) / "admin_token").read_text().strip()

    @property
    def admin_principal_id(self) -> str:
        raw = json.loads((Path(self.config.state_dir) / "bootstrap.json").read_text())
        return raw["admin_principal_id"]

    @property
    def default_collection_id(self) -> str:
        raw = json.loads((Path(self.config.state_dir) / "bootstrap.json").read_text())
        return raw["default_collection_id"]

    def resource_owner(self, resource_type: str, resource_id: str) -> str:
        if resource_type == "asset":
            return self.registry.get_asset(resource_id).owner
        if resource_type == "flow":
            return self.registry.get_flow(resource_id).owner
        if resource_type == "collection":
            return self.store.get_collection(resource_id).owner
        if resource_type == "endpoint":
            return self.hub.get_endpoint(resource_id).registered_by
        raise ValueError(f"unknown resource type {resource_type!r}")

    # -- wiring ---------------------------------------------------------------------

    def _on_commit(self, asset_id: str, version: int) -> None:
        for dispatch in self.trigger.on_commit(asset_id, version):
            self.runner.submit(dispatch)

    def _on_flow_event(self, event: str, spec: FlowSpec) -> None:
        if event == "registered":
            self.trigger.install_flow(spec, utcnow())
        elif event == "deleted":
            self.trigger.remove_flow(spec.flow_id)

    def _tick_loop(self) -> None:
        ticks = 0
        while not self._stop.wait(self.config.tick_interval_s):
            ticks += 1
            try:
                for dispatch in self.trigger.tick(utcnow()):
                    self.runner.submit(dispatch)
            except Exception:
                log.exception("trigger tick failed")
            if ticks % _GC_EVERY_TICKS == 0:
                try:
                    self.store.gc_staging()
                except Exception:
                    log.exception("staging GC failed")

    def _bootstrap(self, state: Path) -> None:
        marker = state / "bootstrap.json"
        if marker.exists():
            return
        admin = self.auth.create_principal("admin", is_admin=True)
        token = self.auth.issue_token(admin.principal_id)
        token_path = state / "admin_token"
        token_path.write_text(token + "\n")
        token_path.chmod(0o600)
        collection_id = self.store.create_collection(admin.principal_id)
        marker.write_text(json.dumps({
            "admin_principal_id": admin.principal_id,
            "default_collection_id": collection_id,
        }, indent=2))
        log.info("bootstrapped fresh state: admin token at %s", token_path)
