"""Durable catalog of assets, versions, flows, runs, and provenance.

Every state mutation is a single transaction on the embedded store, so
concurrent flow completions and API calls can never observe half-commits.
Commit notifications (used by the trigger engine) and flow-lifecycle
notifications fire only after the transaction is durable, outside the
store lock.
"""

from __future__ import annotations

import logging
import sqlite3
import threading
from typing import Any, Callable

from .auth import AclStore
from .collection_store import CollectionStore
from .db import Database, dumps, loads
from .errors import (
    CyclicDependency,
    DuplicateFlow,
    DuplicateName,
    Forbidden,
    UnknownAsset,
    UnknownEndpoint,
    UnknownFlow,
    UnknownFunction,
    UnknownKey,
    UnknownVersion,
)
from .model import (
    CommitOutcome,
    CommitResult,
    DataAsset,
    DataVersion,
    FlowKind,
    FlowRun,
    FlowSpec,
    InputBinding,
    OutputDecl,
    ProvenanceTree,
    RuleKind,
    RunStatus,
    StepRecord,
    TriggerRule,
    VersionMetadata,
    isots,
    new_id,
    parse_ts,
    require_checksum,
    require_http_url,
    utcnow,
)
from .search import SearchEntry, SearchIndex

log = logging.getLogger(__name__)

CommitListener = Callable[[str, int], None]
FlowListener = Callable[[str, FlowSpec], None]


class ProvenanceInput:
    """Provenance payload supplied with a commit: which run, which function,
    and the exact input versions consumed."""

    def __init__(self, run_id: str, function_ref: str, inputs: list[tuple[str, int]]):
        self.run_id = run_id
        self.function_ref = function_ref
        self.inputs = sorted(inputs)


class Registry:
    def __init__(
        self,
        db: Database,
        store: CollectionStore,
        acl: AclStore,
        search: SearchIndex | None = None,
        download_url_builder: Callable[[str, str], str] | None = None,
    ):
        self._db = db
        self._store = store
        self._acl = acl
        self._search = search if search is not None else SearchIndex()
        self._url = download_url_builder or (lambda cid, key: f"store://{cid}/{key}")
        self._commit_listeners: list[CommitListener] = []
        self._flow_listeners: list[FlowListener] = []
        # commit_version is read-decide-write; this serializes whole commits
        # so concurrent flows targeting one asset cannot interleave.
        self._commit_mutex = threading.Lock()

    @property
    def search_index(self) -> SearchIndex:
        return self._search

    def add_commit_listener(self, cb: CommitListener) -> None:
        self._commit_listeners.append(cb)

    def add_flow_listener(self, cb: FlowListener) -> None:
        """cb(event, spec) with event in {registered, deleted}."""
        self._flow_listeners.append(cb)

    # -- assets ----------------------------------------------------------------

    def create_asset(
        self,
        name: str,
        description: str,
        tags: set[str],
        collection_ref: str,
        source_url: str | None,
        owner: str,
    ) -> str:
        if not name:
            raise ValueError("asset name must be non-empty")
        if source_url is not None:
            require_http_url(source_url)
        collection = self._store.get_collection(collection_ref)
        self._acl.require(owner, "collection", collection_ref, "write", owner=collection.owner)
        if self._db.query_one(
            "SELECT 1 FROM assets WHERE name = ? AND owner = ? AND deleted_at IS NULL",
            (name, owner),
        ):
            raise DuplicateName(f"asset {name!r} already exists for this owner")
        asset_id = new_id()
        try:
            with self._db.transaction() as cur:
                cur.execute(
                    "INSERT INTO assets (asset_id, name, description, tags, collection_ref,"
                    " source_url, owner, created_at) VALUES (?, ?, ?, ?, ?, ?, ?, ?)",
                    (
                        asset_id,
                        name,
                        description,
                        dumps(sorted(tags)),
                        collection_ref,
                        source_url,
                        owner,
                        isots(utcnow()),
                    ),
                )
        except sqlite3.IntegrityError as exc:
            raise DuplicateName(f"asset {name!r} already exists for this owner") from exc
        return asset_id

    def get_asset(self, asset_id: str) -> DataAsset:
        row = self._db.query_one(
            "SELECT * FROM assets WHERE asset_id = ? AND deleted_at IS NULL", (asset_id,)
        )
        if row is None:
            raise UnknownAsset(asset_id)
        return DataAsset(
            asset_id=row["asset_id"],
            name=row["name"],
            description=row["description"],
            tags=set(loads(row["tags"])),
            collection_ref=row["collection_ref"],
            source_url=row["source_url"],
            owner=row["owner"],
            created_at=parse_ts(row["created_at"]),
            last_polled_at=parse_ts(row["last_polled_at"]) if row["last_polled_at"] else None,
        )

    def touch_last_polled(self, asset_id: str) -> None:
        with self._db.transaction() as cur:
            cur.execute(
                "UPDATE assets SET last_polled_at = ? WHERE asset_id = ?",
                (isots(utcnow()), asset_id),
            )

    def asset_exists(self, asset_id: str) -> bool:
        return (
            self._db.query_one(
                "SELECT 1 FROM assets WHERE asset_id = ? AND deleted_at IS NULL", (asset_id,)
            )
            is not None
        )

    def asset_readers(self, asset_id: str) -> set[str]:
        """Principals with read visibility on the asset (owner included)."""
        asset = self.get_asset(asset_id)
        return {asset.owner} | self._acl.readers_of("asset", asset_id)

    def require_asset_read(self, asset_id: str, principal: str | None) -> DataAsset:
        asset = self.get_asset(asset_id)
        self._acl.require(principal, "asset", asset_id, "read", owner=asset.owner)
        return asset

    # -- versions ----------------------------------------------------------------

    def latest_version(self, asset_id: str) -> DataVersion | None:
        row = self._db.query_one(
            "SELECT * FROM versions WHERE asset_id = ? ORDER BY version DESC LIMIT 1",
            (asset_id,),
        )
        return self._version_from_row(row) if row else None

    def list_versions(self, asset_id: str) -> list[DataVersion]:
        rows = self._db.query(
            "SELECT * FROM versions WHERE asset_id = ? ORDER BY version", (asset_id,)
        )
        return [self._version_from_row(r) for r in rows]

    def version_count(self, asset_id: str) -> int:
        return self._db.query_one(
            "SELECT COUNT(*) AS n FROM versions WHERE asset_id = ?", (asset_id,)
        )["n"]

    def commit_version(
        self,
        asset_id: str,
        checksum: str,
        size_bytes: int,
        media_type: str,
        staged_key: str,
        provenance: ProvenanceInput | None = None,
    ) -> CommitResult:
        """Append a version unless the content is unchanged from the latest.

        Unchanged commits discard the staged object and touch nothing else;
        new versions promote the staged object, store provenance when given,
        update the search index, and notify commit listeners afterwards.
        """
        with self._commit_mutex:
            asset = self.get_asset(asset_id)
            require_checksum(checksum)
            if not self._store.staged_exists(asset.collection_ref, staged_key):
                raise UnknownKey(f"staged object {staged_key} not found")
            if provenance is not None:
                for in_asset, in_version in provenance.inputs:
                    if not self._version_exists(in_asset, in_version):
                        raise UnknownVersion(f"provenance input {in_asset}@{in_version}")

            now = utcnow()
            latest = self.latest_version(asset_id)
            if latest is not None and latest.checksum == checksum:
                self._store.discard_staged(asset.collection_ref, staged_key)
                with self._db.transaction() as cur:
                    cur.execute(
                        "UPDATE assets SET last_polled_at = ? WHERE asset_id = ?",
                        (isots(now), asset_id),
                    )
                return CommitResult(CommitOutcome.UNCHANGED, latest.version)

            storage_key = self._store.promote(asset.collection_ref, staged_key)
            version = (latest.version if latest else 0) + 1
            with self._db.transaction() as cur:
                cur.execute(
                    "INSERT INTO versions (asset_id, version, checksum, size_bytes, media_type,"
                    " storage_key, created_at) VALUES (?, ?, ?, ?, ?, ?, ?)",
                    (asset_id, version, checksum, size_bytes, media_type, storage_key, isots(now)),
                )
                if provenance is not None:
                    cur.execute(
                        "INSERT INTO provenance (asset_id, version, run_id, function_ref, inputs,"
                        " recorded_at) VALUES (?, ?, ?, ?, ?, ?)",
                        (
                            asset_id,
                            version,
                            provenance.run_id,
                            provenance.function_ref,
                            dumps([list(p) for p in provenance.inputs]),
                            isots(now),
                        ),
                    )
                cur.execute(
                    "UPDATE assets SET last_polled_at = ? WHERE asset_id = ?",
                    (isots(now), asset_id),
                )

            self._search.index_version(
                self._search_entry(asset, version, checksum, size_bytes, storage_key, now, provenance)
            )
        for cb in self._commit_listeners:
            try:
                cb(asset_id, version)
            except Exception:
                log.exception("commit listener failed for %s@%s", asset_id, version)
        return CommitResult(CommitOutcome.NEW_VERSION, version)

    def get_metadata(self, asset_id: str, version: int | None, principal: str | None = None) -> VersionMetadata:
        """Version metadata plus a download URL pointing at the collection
        server (data bytes never transit the API server)."""
        asset = self.get_asset(asset_id)
        self._acl.require(principal, "asset", asset_id, "read", owner=asset.owner)
        if version is None:
            dv = self.latest_version(asset_id)
            if dv is None:
                raise UnknownVersion(f"{asset_id} has no versions")
        else:
            row = self._db.query_one(
                "SELECT * FROM versions WHERE asset_id = ? AND version = ?", (asset_id, version)
            )
            if row is None:
                raise UnknownVersion(f"{asset_id}@{version}")
            dv = self._version_from_row(row)
        return VersionMetadata(
            asset_id=dv.asset_id,
            version=dv.version,
            checksum=dv.checksum,
            size_bytes=dv.size_bytes,
            media_type=dv.media_type,
            storage_key=dv.storage_key,
            created_at=dv.created_at,
            download_url=self._url(asset.collection_ref, dv.storage_key),
        )

    # -- flows ------------------------------------------------------------------

    def register_flow(
        self,
        kind: FlowKind,
        function_ref: str,
        endpoint_ref: str,
        inputs: dict[str, InputBinding],
        outputs: dict[str, OutputDecl],
        kwargs: dict[str, Any],
        rule: TriggerRule,
        contact: str,
        owner: str,
    ) -> FlowSpec:
        if self._db.query_one(
            "SELECT 1 FROM functions WHERE function_id = ?", (function_ref,)
        ) is None:
            raise UnknownFunction(function_ref)
        endpoint_row = self._db.query_one(
            "SELECT * FROM endpoints WHERE endpoint_id = ?", (endpoint_ref,)
        )
        if endpoint_row is None:
            raise UnknownEndpoint(endpoint_ref)
        self._acl.require(
            owner, "endpoint", endpoint_ref, "execute", owner=endpoint_row["registered_by"]
        )

        for param, binding in inputs.items():
            if not self.asset_exists(binding.asset_id):
                raise UnknownAsset(f"input {param!r} references {binding.asset_id}")
        monitored = {p for p, b in inputs.items() if b.selector.is_latest}
        if rule.kind is not RuleKind.PERIODIC and not monitored:
            raise ValueError("update rules need at least one monitored (latest) input")

        if not outputs:
            raise ValueError("flows must declare at least one output")
        if kind is FlowKind.INGESTION and len(outputs) != 1:
            raise ValueError("ingestion flows have exactly one output")

        # Materialize template outputs up front so the dependency graph and
        # provenance targets are stable from registration onward.
        resolved_outputs: dict[str, OutputDecl] = {}
        created_assets: list[str] = []
        for name, decl in outputs.items():
            if decl.template is not None:
                asset_id = self.create_asset(
                    name=decl.template.name,
                    description=decl.template.description,
                    tags=set(decl.template.tags),
                    collection_ref=decl.template.collection_ref,
                    source_url=None,
                    owner=owner,
                )
                created_assets.append(asset_id)
                resolved_outputs[name] = OutputDecl(asset_id=asset_id)
            else:
                if not self.asset_exists(decl.asset_id):
                    raise UnknownAsset(f"output {name!r} references {decl.asset_id}")
                resolved_outputs[name] = decl

        if kind is FlowKind.INGESTION:
            target = self.get_asset(next(iter(resolved_outputs.values())).asset_id)
            if not target.source_url:
                raise ValueError("ingestion target asset must carry a source_url")
            collection = self._store.get_collection(target.collection_ref)
            self._acl.require(
                owner, "collection", target.collection_ref, "write", owner=collection.owner
            )

        input_assets = {b.asset_id for b in inputs.values()}
        output_assets = {d.asset_id for d in resolved_outputs.values()}
        if input_assets & output_assets:
            raise CyclicDependency("flow output feeds its own input")
        self._check_acyclic(input_assets, output_assets)

        spec = FlowSpec(
            flow_id=new_id(),
            kind=kind,
            function_ref=function_ref,
            endpoint_ref=endpoint_ref,
            inputs=dict(inputs),
            outputs=resolved_outputs,
            kwargs=dict(kwargs),
            rule=rule,
            contact=contact,
            owner=owner,
        )
        try:
            with self._db.transaction() as cur:
                cur.execute(
                    "INSERT INTO flows (flow_id, kind, function_ref, endpoint_ref, inputs,"
                    " outputs, kwargs, rule, contact, owner, dedup_key, created_at)"
                    " VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)",
                    (
                        spec.flow_id,
                        spec.kind.value,
                        function_ref,
                        endpoint_ref,
                        dumps({p: b.to_json() for p, b in inputs.items()}),
                        dumps({n: d.to_json() for n, d in resolved_outputs.items()}),
                        dumps(kwargs),
                        dumps(rule.to_json()),
                        contact,
                        owner,
                        spec.dedup_key,
                        isots(spec.created_at),
                    ),
                )
                for param, binding in inputs.items():
                    if binding.selector.is_latest:
                        cur.execute(
                            "INSERT OR IGNORE INTO flow_deps (asset_id, flow_id, param)"
                            " VALUES (?, ?, ?)",
                            (binding.asset_id, spec.flow_id, param),
                        )
        except sqlite3.IntegrityError as exc:
            raise DuplicateFlow("an identical flow is already registered") from exc

        for cb in self._flow_listeners:
            try:
                cb("registered", spec)
            except Exception:
                log.exception("flow listener failed for %s", spec.flow_id)
        return spec

    def get_flow(self, flow_id: str) -> FlowSpec:
        row = self._db.query_one(
            "SELECT * FROM flows WHERE flow_id = ? AND deleted_at IS NULL", (flow_id,)
        )
        if row is None:
            raise UnknownFlow(flow_id)
        return self._flow_from_row(row)

    def list_flows(self) -> list[FlowSpec]:
        rows = self._db.query("SELECT * FROM flows WHERE deleted_at IS NULL ORDER BY created_at")
        return [self._flow_from_row(r) for r in rows]

    def delete_flow(self, flow_id: str, caller: str | None) -> None:
        spec = self.get_flow(flow_id)
        self._acl.require(caller, "flow", flow_id, "admin", owner=spec.owner)
        with self._db.transaction() as cur:
            cur.execute(
                "UPDATE flows SET deleted_at = ? WHERE flow_id = ?", (isots(utcnow()), flow_id)
            )
            cur.execute("DELETE FROM flow_deps WHERE flow_id = ?", (flow_id,))
            cur.execute("DELETE FROM schedules WHERE flow_id = ?", (flow_id,))
            cur.execute("DELETE FROM pending_updates WHERE flow_id = ?", (flow_id,))
        for cb in self._flow_listeners:
            try:
                cb("deleted", spec)
            except Exception:
                log.exception("flow listener failed for %s", flow_id)

    def dependents_of(self, asset_id: str) -> list[str]:
        if not self.asset_exists(asset_id):
            raise UnknownAsset(asset_id)
        rows = self._db.query(
            "SELECT DISTINCT d.flow_id FROM flow_deps d JOIN flows f ON f.flow_id = d.flow_id"
            " WHERE d.asset_id = ? AND f.deleted_at IS NULL ORDER BY d.flow_id",
            (asset_id,),
        )
        return [r["flow_id"] for r in rows]

    # -- provenance ----------------------------------------------------------------

    def provenance_of(self, asset_id: str, version: int, depth: int | None = None) -> ProvenanceTree:
        if not self._version_exists(asset_id, version):
            raise UnknownVersion(f"{asset_id}@{version}")
        return self._build_tree(asset_id, version, depth)

    def _build_tree(self, asset_id: str, version: int, depth: int | None) -> ProvenanceTree:
        row = self._db.query_one(
            "SELECT * FROM provenance WHERE asset_id = ? AND version = ?", (asset_id, version)
        )
        node = ProvenanceTree(
            asset_id=asset_id,
            version=version,
            run_id=row["run_id"] if row else None,
            function_ref=row["function_ref"] if row else None,
        )
        if row is None or depth == 0:
            return node
        child_depth = None if depth is None else depth - 1
        for in_asset, in_version in loads(row["inputs"]):
            node.children.append(self._build_tree(in_asset, in_version, child_depth))
        return node

    def provenance_edges(self) -> list[tuple[tuple[str, int], tuple[str, int]]]:
        """(output, input) version pairs; used by audit tooling and tests."""
        edges = []
        for row in self._db.query("SELECT * FROM provenance"):
            out = (row["asset_id"], row["version"])
            for in_asset, in_version in loads(row["inputs"]):
                edges.append((out, (in_asset, in_version)))
        return edges

    # -- runs -------------------------------------------------------------------------

    def create_run(self, flow_id: str, reason: str) -> FlowRun:
        run = FlowRun(
            run_id=new_id(),
            flow_id=flow_id,
            status=RunStatus.PENDING,
            attempt=1,
            reason=reason,
            started_at=utcnow(),
        )
        self.save_run(run)
        return run

    def save_run(self, run: FlowRun) -> None:
        with self._db.transaction() as cur:
            cur.execute(
                "INSERT INTO runs (run_id, flow_id, status, attempt, reason, resolved_inputs,"
                " produced_outputs, step_records, error_class, error_message, started_at,"
                " ended_at, task_started, task_ended)"
                " VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)"
                " ON CONFLICT(run_id) DO UPDATE SET status=excluded.status,"
                " attempt=excluded.attempt, resolved_inputs=excluded.resolved_inputs,"
                " produced_outputs=excluded.produced_outputs, step_records=excluded.step_records,"
                " error_class=excluded.error_class, error_message=excluded.error_message,"
                " started_at=excluded.started_at, ended_at=excluded.ended_at,"
                " task_started=excluded.task_started, task_ended=excluded.task_ended",
                (
                    run.run_id,
                    run.flow_id,
                    run.status.value,
                    run.attempt,
                    run.reason,
                    dumps({p: list(v) for p, v in run.resolved_inputs.items()}),
                    dumps({p: list(v) for p, v in run.produced_outputs.items()}),
                    dumps([s.to_json() for s in run.step_records]),
                    run.error_class,
                    run.error_message,
                    isots(run.started_at) if run.started_at else None,
                    isots(run.ended_at) if run.ended_at else None,
                    isots(run.task_started) if run.task_started else None,
                    isots(run.task_ended) if run.task_ended else None,
                ),
            )

    def get_run(self, run_id: str) -> FlowRun:
        row = self._db.query_one("SELECT * FROM runs WHERE run_id = ?", (run_id,))
        if row is None:
            raise UnknownFlow(f"run {run_id}")
        return self._run_from_row(row)

    def list_runs(self, flow_id: str, caller: str | None) -> list[FlowRun]:
        spec = self.get_flow(flow_id)
        if caller != spec.owner and not self._acl.allows(
            caller, "flow", flow_id, "view_runs", owner=spec.owner
        ):
            raise Forbidden(f"run visibility denied on flow {flow_id}")
        rows = self._db.query(
            "SELECT * FROM runs WHERE flow_id = ? ORDER BY started_at, run_id", (flow_id,)
        )
        return [self._run_from_row(r) for r in rows]

    # -- search plumbing -----------------------------------------------------------------

    def refresh_search_visibility(self, asset_id: str) -> None:
        if self.asset_exists(asset_id):
            self._search.update_visibility(asset_id, self.asset_readers(asset_id))

    def rebuild_search_index(self) -> None:
        entries = []
        for asset_row in self._db.query("SELECT asset_id FROM assets WHERE deleted_at IS NULL"):
            asset = self.get_asset(asset_row["asset_id"])
            for dv in self.list_versions(asset.asset_id):
                prov_row = self._db.query_one(
                    "SELECT * FROM provenance WHERE asset_id = ? AND version = ?",
                    (asset.asset_id, dv.version),
                )
                prov = None
                if prov_row:
                    prov = ProvenanceInput(
                        prov_row["run_id"],
                        prov_row["function_ref"],
                        [tuple(p) for p in loads(prov_row["inputs"])],
                    )
                entries.append(
                    self._search_entry(
                        asset, dv.version, dv.checksum, dv.size_bytes, dv.storage_key,
                        dv.created_at, prov,
                    )
                )
        self._search.rebuild(entries)

    # -- audit ----------------------------------------------------------------------------

    def fsck(self) -> list[str]:
        """Recompute every stored object's checksum against the catalog."""
        from .collection_store import hash_file

        problems = []
        for row in self._db.query("SELECT * FROM versions"):
            asset = self.get_asset(row["asset_id"])
            try:
                path = self._store.object_path(asset.collection_ref, row["storage_key"])
            except Exception as exc:
                problems.append(f"{row['asset_id']}@{row['version']}: missing object ({exc})")
                continue
            digest, size = hash_file(path)
            if digest != row["checksum"]:
                problems.append(f"{row['asset_id']}@{row['version']}: checksum mismatch")
            if size != row["size_bytes"]:
                problems.append(f"{row['asset_id']}@{row['version']}: size mismatch")
        return problems

    # -- internals ---------------------------------------------------------------------------

    def _search_entry(
        self,
        asset: DataAsset,
        version: int,
        checksum: str,
        size_bytes: int,
        storage_key: str,
        created_at,
        provenance: ProvenanceInput | None,
    ) -> SearchEntry:
        if provenance is not None:
            source = f"run:{provenance.run_id}"
            summary = "produced by {} from {}".format(
                provenance.function_ref,
                ", ".join(f"{a}@{v}" for a, v in provenance.inputs) or "no inputs",
            )
        elif asset.source_url:
            source = asset.source_url
            summary = f"ingested from {asset.source_url}"
        else:
            source = ""
            summary = "directly committed"
        return SearchEntry(
            asset_id=asset.asset_id,
            version=version,
            name=asset.name,
            description=asset.description,
            original_source=source,
            download_url=self._url(asset.collection_ref, storage_key),
            tags=set(asset.tags),
            size_bytes=size_bytes,
            checksum=checksum,
            created_at=created_at,
            provenance_summary=summary,
            visibility=self.asset_readers(asset.asset_id),
        )

    def _check_acyclic(self, input_assets: set[str], output_assets: set[str]) -> None:
        """Reject the registration if, together with existing live flows, an
        asset could transitively feed itself."""
        edges: dict[str, set[str]] = {}
        for spec in self.list_flows():
            srcs = {b.asset_id for b in spec.inputs.values()}
            dsts = {d.asset_id for d in spec.outputs.values()}
            for s in srcs:
                edges.setdefault(s, set()).update(dsts)
        for s in input_assets:
            edges.setdefault(s, set()).update(output_assets)

        # Any new output reaching back into any new input closes a cycle.
        seen: set[str] = set()
        stack = list(output_assets)
        while stack:
            node = stack.pop()
            if node in seen:
                continue
            seen.add(node)
            stack.extend(edges.get(node, ()))
        reachable = seen & input_assets
        if reachable:
            raise CyclicDependency(
                f"asset {sorted(reachable)[0]} would transitively feed itself"
            )

    def _version_exists(self, asset_id: str, version: int) -> bool:
        return (
            self._db.query_one(
                "SELECT 1 FROM versions WHERE asset_id = ? AND version = ?", (asset_id, version)
            )
            is not None
        )

    @staticmethod
    def _version_from_row(row) -> DataVersion:
        return DataVersion(
            asset_id=row["asset_id"],
            version=row["version"],
            checksum=row["checksum"],
            size_bytes=row["size_bytes"],
            media_type=row["media_type"],
            storage_key=row["storage_key"],
            created_at=parse_ts(row["created_at"]),
        )

    @staticmethod
    def _flow_from_row(row) -> FlowSpec:
        return FlowSpec(
            flow_id=row["flow_id"],
            kind=FlowKind(row["kind"]),
            function_ref=row["function_ref"],
            endpoint_ref=row["endpoint_ref"],
            inputs={p: InputBinding.from_json(b) for p, b in loads(row["inputs"]).items()},
            outputs={n: OutputDecl.from_json(d) for n, d in loads(row["outputs"]).items()},
            kwargs=loads(row["kwargs"]),
            rule=TriggerRule.from_json(loads(row["rule"])),
            contact=row["contact"],
            owner=row["owner"],
            created_at=parse_ts(row["created_at"]),
        )

    @staticmethod
    def _run_from_row(row) -> FlowRun:
        return FlowRun(
            run_id=row["run_id"],
            flow_id=row["flow_id"],
            status=RunStatus(row["status"]),
            attempt=row["attempt"],
            reason=row["reason"],
            resolved_inputs={p: tuple(v) for p, v in loads(row["resolved_inputs"]).items()},
            produced_outputs={p: tuple(v) for p, v in loads(row["produced_outputs"]).items()},
            step_records=[StepRecord.from_json(s) for s in loads(row["step_records"])],
            error_class=row["error_class"],
            error_message=row["error_message"],
            started_at=parse_ts(row["started_at"]) if row["started_at"] else None,
            ended_at=parse_ts(row["ended_at"]) if row["ended_at"] else None,
            task_started=parse_ts(row["task_started"]) if row["task_started"] else None,
            task_ended=parse_ts(row["task_ended"]) if row["task_ended"] else None,
        )
