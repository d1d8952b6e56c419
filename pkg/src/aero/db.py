"""Embedded durable store.

One SQLite connection guarded by a process-wide lock: every mutation runs
inside a single transaction, so concurrent flow completions, trigger
evaluation, and API handlers always observe whole commits. Readers share
the same connection; queries are short and the lock keeps them linearizable
with respect to writers.
"""

from __future__ import annotations

import json
import sqlite3
import threading
from contextlib import contextmanager
from pathlib import Path

SCHEMA_VERSION = 1

_SCHEMA = """
CREATE TABLE IF NOT EXISTS meta (
    key TEXT PRIMARY KEY,
    value TEXT NOT NULL
);

CREATE TABLE IF NOT EXISTS principals (
    principal_id TEXT PRIMARY KEY,
    display_name TEXT NOT NULL,
    is_admin INTEGER NOT NULL DEFAULT 0,
    created_at TEXT NOT NULL
);

CREATE TABLE IF NOT EXISTS tokens (
    token_hash TEXT PRIMARY KEY,
    salt TEXT NOT NULL,
    principal_id TEXT NOT NULL REFERENCES principals(principal_id),
    created_at TEXT NOT NULL,
    revoked_at TEXT
);

CREATE TABLE IF NOT EXISTS acl (
    resource_type TEXT NOT NULL,
    resource_id TEXT NOT NULL,
    principal_id TEXT NOT NULL,
    perm TEXT NOT NULL,
    PRIMARY KEY (resource_type, resource_id, principal_id, perm)
);

CREATE TABLE IF NOT EXISTS collections (
    collection_id TEXT PRIMARY KEY,
    owner TEXT NOT NULL,
    created_at TEXT NOT NULL
);

CREATE TABLE IF NOT EXISTS assets (
    asset_id TEXT PRIMARY KEY,
    name TEXT NOT NULL,
    description TEXT NOT NULL,
    tags TEXT NOT NULL,
    collection_ref TEXT NOT NULL,
    source_url TEXT,
    owner TEXT NOT NULL,
    created_at TEXT NOT NULL,
    last_polled_at TEXT,
    deleted_at TEXT
);
CREATE UNIQUE INDEX IF NOT EXISTS assets_live_name
    ON assets(name, owner) WHERE deleted_at IS NULL;

CREATE TABLE IF NOT EXISTS versions (
    asset_id TEXT NOT NULL REFERENCES assets(asset_id),
    version INTEGER NOT NULL,
    checksum TEXT NOT NULL,
    size_bytes INTEGER NOT NULL,
    media_type TEXT NOT NULL,
    storage_key TEXT NOT NULL,
    created_at TEXT NOT NULL,
    PRIMARY KEY (asset_id, version)
);

CREATE TABLE IF NOT EXISTS provenance (
    asset_id TEXT NOT NULL,
    version INTEGER NOT NULL,
    run_id TEXT NOT NULL,
    function_ref TEXT NOT NULL,
    inputs TEXT NOT NULL,
    recorded_at TEXT NOT NULL,
    PRIMARY KEY (asset_id, version)
);

CREATE TABLE IF NOT EXISTS functions (
    function_id TEXT PRIMARY KEY,
    entry TEXT NOT NULL,
    description TEXT NOT NULL,
    registered_by TEXT NOT NULL,
    created_at TEXT NOT NULL
);

CREATE TABLE IF NOT EXISTS endpoints (
    endpoint_id TEXT PRIMARY KEY,
    kind TEXT NOT NULL,
    slots INTEGER NOT NULL,
    base_url TEXT,
    allowed_functions TEXT,
    registered_by TEXT NOT NULL,
    created_at TEXT NOT NULL
);

CREATE TABLE IF NOT EXISTS flows (
    flow_id TEXT PRIMARY KEY,
    kind TEXT NOT NULL,
    function_ref TEXT NOT NULL,
    endpoint_ref TEXT NOT NULL,
    inputs TEXT NOT NULL,
    outputs TEXT NOT NULL,
    kwargs TEXT NOT NULL,
    rule TEXT NOT NULL,
    contact TEXT NOT NULL,
    owner TEXT NOT NULL,
    dedup_key TEXT NOT NULL,
    created_at TEXT NOT NULL,
    deleted_at TEXT
);
CREATE UNIQUE INDEX IF NOT EXISTS flows_live_dedup
    ON flows(dedup_key) WHERE deleted_at IS NULL;

CREATE TABLE IF NOT EXISTS flow_deps (
    asset_id TEXT NOT NULL,
    flow_id TEXT NOT NULL,
    param TEXT NOT NULL,
    PRIMARY KEY (asset_id, flow_id, param)
);

CREATE TABLE IF NOT EXISTS runs (
    run_id TEXT PRIMARY KEY,
    flow_id TEXT NOT NULL,
    status TEXT NOT NULL,
    attempt INTEGER NOT NULL,
    reason TEXT NOT NULL,
    resolved_inputs TEXT NOT NULL,
    produced_outputs TEXT NOT NULL,
    step_records TEXT NOT NULL,
    error_class TEXT,
    error_message TEXT,
    started_at TEXT,
    ended_at TEXT,
    task_started TEXT,
    task_ended TEXT
);
CREATE INDEX IF NOT EXISTS runs_by_flow ON runs(flow_id, started_at);

CREATE TABLE IF NOT EXISTS schedules (
    flow_id TEXT PRIMARY KEY,
    interval_s REAL NOT NULL,
    anchor_at TEXT NOT NULL,
    next_due TEXT NOT NULL,
    last_fired TEXT
);

CREATE TABLE IF NOT EXISTS pending_updates (
    flow_id TEXT NOT NULL,
    param TEXT NOT NULL,
    PRIMARY KEY (flow_id, param)
);

CREATE TABLE IF NOT EXISTS notifications (
    notification_id TEXT PRIMARY KEY,
    run_id TEXT NOT NULL,
    flow_id TEXT NOT NULL,
    status TEXT NOT NULL,
    sink TEXT NOT NULL,
    target TEXT NOT NULL,
    message TEXT NOT NULL,
    created_at TEXT NOT NULL,
    delivered INTEGER NOT NULL
);
"""


class Database:
    """Serialized access to the registry's SQLite file.

    ``path`` may be ``":memory:"`` for tests.
    """

    def __init__(self, path: str | Path):
        self.path = str(path)
        if self.path != ":memory:":
            Path(self.path).parent.mkdir(parents=True, exist_ok=True)
        self._conn = sqlite3.connect(self.path, check_same_thread=False)
        self._conn.row_factory = sqlite3.Row
        self._lock = threading.RLock()
        with self.transaction() as cur:
            cur.execute("PRAGMA journal_mode=WAL")
            cur.execute("PRAGMA synchronous=NORMAL")
            cur.executescript(_SCHEMA)
            cur.execute(
                "INSERT OR IGNORE INTO meta (key, value) VALUES ('schema_version', ?)",
                (str(SCHEMA_VERSION),),
            )

    @contextmanager
    def transaction(self):
        """All-or-nothing mutation scope; also used for consistent reads."""
        with self._lock:
            cur = self._conn.cursor()
            try:
                yield cur
                self._conn.commit()
            except BaseException:
                self._conn.rollback()
                raise
            finally:
                cur.close()

    def query(self, sql: str, params: tuple = ()) -> list[sqlite3.Row]:
        with self._lock:
            return self._conn.execute(sql, params).fetchall()

    def query_one(self, sql: str, params: tuple = ()) -> sqlite3.Row | None:
        rows = self.query(sql, params)
        return rows[0] if rows else None

    def close(self) -> None:
        with self._lock:
            self._conn.close()


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def loads(raw: str):
    return json.loads(raw)
