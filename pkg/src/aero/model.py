"""Domain types shared across modules.

Everything here is plain data: dataclasses plus enums, with explicit
``to_json``/``from_json`` converters for the types that cross the HTTP or
manifest boundaries. Durable persistence lives in :mod:`aero.registry`.
"""

from __future__ import annotations

import hashlib
import json
import re
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from typing import Any
from urllib.parse import urlparse

from .errors import InvalidUrl, MalformedChecksum

_SHA256_RE = re.compile(r"^[0-9a-f]{64}$")


def utcnow() -> datetime:
    return datetime.now(timezone.utc)


def isots(dt: datetime) -> str:
    """RFC 3339 rendering with explicit offset."""
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.isoformat()


def parse_ts(value: str) -> datetime:
    # 3.10's fromisoformat rejects a trailing Z.
    if value.endswith("Z"):
        value = value[:-1] + "+00:00"
    dt = datetime.fromisoformat(value)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt


def new_id() -> str:
    return str(uuid.uuid4())


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def require_checksum(value: str) -> str:
    if not isinstance(value, str) or not _SHA256_RE.match(value):
        raise MalformedChecksum(f"not a lowercase sha-256 hex digest: {value!r}")
    return value


def require_http_url(value: str) -> str:
    parsed = urlparse(value)
    if parsed.scheme not in ("http", "https") or not parsed.netloc:
        raise InvalidUrl(f"expected absolute http(s) URL, got {value!r}")
    return value


# -- assets and versions ------------------------------------------------------

@dataclass
class DataAsset:
    asset_id: str
    name: str
    description: str
    tags: set[str]
    collection_ref: str
    source_url: str | None
    owner: str
    created_at: datetime
    last_polled_at: datetime | None = None


@dataclass
class DataVersion:
    asset_id: str
    version: int
    checksum: str
    size_bytes: int
    media_type: str
    storage_key: str
    created_at: datetime


class CommitOutcome(Enum):
    NEW_VERSION = "new_version"
    UNCHANGED = "unchanged"


@dataclass(frozen=True)
class CommitResult:
    outcome: CommitOutcome
    version: int

    @property
    def is_new(self) -> bool:
        return self.outcome is CommitOutcome.NEW_VERSION


@dataclass
class VersionMetadata:
    """DataVersion fields plus where a client may download the bytes from."""

    asset_id: str
    version: int
    checksum: str
    size_bytes: int
    media_type: str
    storage_key: str
    created_at: datetime
    download_url: str

    def to_json(self) -> dict[str, Any]:
        return {
            "asset_id": self.asset_id,
            "version": self.version,
            "checksum": self.checksum,
            "size_bytes": self.size_bytes,
            "media_type": self.media_type,
            "storage_key": self.storage_key,
            "created_at": isots(self.created_at),
            "download_url": self.download_url,
        }


# -- provenance ---------------------------------------------------------------

@dataclass
class ProvenanceRecord:
    output: tuple[str, int]
    run_id: str
    function_ref: str
    inputs: list[tuple[str, int]]
    recorded_at: datetime


@dataclass
class ProvenanceTree:
    """Tree rooted at one version; children are the input versions it was
    produced from. Shared ancestors appear once per path."""

    asset_id: str
    version: int
    run_id: str | None = None
    function_ref: str | None = None
    children: list["ProvenanceTree"] = field(default_factory=list)

    def node_count(self) -> int:
        return 1 + sum(c.node_count() for c in self.children)

    def to_json(self) -> dict[str, Any]:
        return {
            "asset_id": self.asset_id,
            "version": self.version,
            "run_id": self.run_id,
            "function_ref": self.function_ref,
            "children": [c.to_json() for c in self.children],
        }


# -- flows ---------------------------------------------------------------------

class FlowKind(Enum):
    INGESTION = "ingestion"
    ANALYSIS = "analysis"


class RuleKind(Enum):
    PERIODIC = "periodic"
    ON_ANY_INPUT_UPDATE = "on_any_input_update"
    ON_ALL_INPUT_UPDATES = "on_all_input_updates"


@dataclass(frozen=True)
class TriggerRule:
    kind: RuleKind
    interval_s: float | None = None

    def __post_init__(self):
        if self.kind is RuleKind.PERIODIC:
            if self.interval_s is None or self.interval_s < 1:
                raise ValueError("periodic rules need an interval of at least 1s")

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {"kind": self.kind.value}
        if self.interval_s is not None:
            out["interval_s"] = self.interval_s
        return out

    @classmethod
    def from_json(cls, raw: dict[str, Any]) -> "TriggerRule":
        return cls(kind=RuleKind(raw["kind"]), interval_s=raw.get("interval_s"))


@dataclass(frozen=True)
class Selector:
    """Version selector: latest, or pinned to a fixed version number."""

    pinned: int | None = None

    @property
    def is_latest(self) -> bool:
        return self.pinned is None

    def to_json(self) -> Any:
        return "latest" if self.pinned is None else ["pinned", self.pinned]

    @classmethod
    def from_json(cls, raw: Any) -> "Selector":
        if raw == "latest":
            return cls()
        if isinstance(raw, (list, tuple)) and len(raw) == 2 and raw[0] == "pinned":
            return cls(pinned=int(raw[1]))
        raise ValueError(f"bad selector: {raw!r}")


LATEST = Selector()


@dataclass(frozen=True)
class InputBinding:
    asset_id: str
    selector: Selector = LATEST

    def to_json(self) -> dict[str, Any]:
        return {"asset_id": self.asset_id, "selector": self.selector.to_json()}

    @classmethod
    def from_json(cls, raw: dict[str, Any]) -> "InputBinding":
        return cls(asset_id=raw["asset_id"], selector=Selector.from_json(raw.get("selector", "latest")))


@dataclass(frozen=True)
class NewAssetTemplate:
    name: str
    description: str
    tags: frozenset[str]
    collection_ref: str

    def to_json(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "description": self.description,
            "tags": sorted(self.tags),
            "collection_ref": self.collection_ref,
        }


@dataclass(frozen=True)
class OutputDecl:
    """Either points at an existing asset or describes one to create."""

    asset_id: str | None = None
    template: NewAssetTemplate | None = None

    def __post_init__(self):
        if (self.asset_id is None) == (self.template is None):
            raise ValueError("output declares exactly one of asset_id or template")

    def to_json(self) -> dict[str, Any]:
        if self.asset_id is not None:
            return {"asset_id": self.asset_id}
        return {"new_asset": self.template.to_json()}

    @classmethod
    def from_json(cls, raw: dict[str, Any]) -> "OutputDecl":
        if "asset_id" in raw:
            return cls(asset_id=raw["asset_id"])
        t = raw["new_asset"]
        return cls(template=NewAssetTemplate(
            name=t["name"],
            description=t.get("description", ""),
            tags=frozenset(t.get("tags", [])),
            collection_ref=t["collection_ref"],
        ))


@dataclass
class FlowSpec:
    flow_id: str
    kind: FlowKind
    function_ref: str
    endpoint_ref: str
    inputs: dict[str, InputBinding]
    outputs: dict[str, OutputDecl]
    kwargs: dict[str, Any]
    rule: TriggerRule
    contact: str
    owner: str
    created_at: datetime = field(default_factory=utcnow)

    def monitored_params(self) -> set[str]:
        """Input params that participate in update rules (Latest bindings)."""
        return {p for p, b in self.inputs.items() if b.selector.is_latest}

    @property
    def dedup_key(self) -> str:
        return flow_dedup_key(self.function_ref, self.endpoint_ref, self.inputs, self.kwargs)


def flow_dedup_key(
    function_ref: str,
    endpoint_ref: str,
    inputs: dict[str, InputBinding],
    kwargs: dict[str, Any],
) -> str:
    """Key-sorted, whitespace-free canonical hash of the identity tuple.

    Outputs are deliberately excluded: two registrations differing only in
    destination are considered the same automation unless a kwarg differs.
    """
    canon = {
        "function": function_ref,
        "endpoint": endpoint_ref,
        "inputs": {p: b.to_json() for p, b in sorted(inputs.items())},
        "kwargs": kwargs,
    }
    encoded = json.dumps(canon, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(encoded.encode()).hexdigest()


# -- runs ----------------------------------------------------------------------

class RunStatus(Enum):
    PENDING = "pending"
    FETCHING = "fetching"
    EXECUTING = "executing"
    COMMITTING = "committing"
    SUCCEEDED = "succeeded"
    SKIPPED = "skipped"
    FAILED_TRANSIENT = "failed_transient"
    FAILED_TERMINAL = "failed_terminal"


TERMINAL_STATUSES = {
    RunStatus.SUCCEEDED,
    RunStatus.SKIPPED,
    RunStatus.FAILED_TRANSIENT,
    RunStatus.FAILED_TERMINAL,
}


@dataclass
class StepRecord:
    name: str
    started_at: datetime
    ended_at: datetime
    outcome: str

    def to_json(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "started_at": isots(self.started_at),
            "ended_at": isots(self.ended_at),
            "outcome": self.outcome,
        }

    @classmethod
    def from_json(cls, raw: dict[str, Any]) -> "StepRecord":
        return cls(raw["name"], parse_ts(raw["started_at"]), parse_ts(raw["ended_at"]), raw["outcome"])


@dataclass
class FlowRun:
    run_id: str
    flow_id: str
    status: RunStatus
    attempt: int
    reason: str
    resolved_inputs: dict[str, tuple[str, int]] = field(default_factory=dict)
    produced_outputs: dict[str, tuple[str, int]] = field(default_factory=dict)
    step_records: list[StepRecord] = field(default_factory=list)
    error_class: str | None = None
    error_message: str | None = None
    started_at: datetime | None = None
    ended_at: datetime | None = None
    task_started: datetime | None = None
    task_ended: datetime | None = None

    @property
    def is_terminal(self) -> bool:
        return self.status in TERMINAL_STATUSES

    def to_json(self) -> dict[str, Any]:
        return {
            "run_id": self.run_id,
            "flow_id": self.flow_id,
            "status": self.status.value,
            "attempt": self.attempt,
            "reason": self.reason,
            "resolved_inputs": {p: list(v) for p, v in self.resolved_inputs.items()},
            "produced_outputs": {p: list(v) for p, v in self.produced_outputs.items()},
            "step_records": [s.to_json() for s in self.step_records],
            "error_class": self.error_class,
            "error_message": self.error_message,
            "started_at": isots(self.started_at) if self.started_at else None,
            "ended_at": isots(self.ended_at) if self.ended_at else None,
            "task_started": isots(self.task_started) if self.task_started else None,
            "task_ended": isots(self.task_ended) if self.task_ended else None,
        }


@dataclass(frozen=True)
class FlowDispatch:
    flow_id: str
    reason: str


# -- executor contract ----------------------------------------------------------

@dataclass
class FunctionRef:
    function_id: str
    entry: str
    description: str
    registered_by: str
    created_at: datetime = field(default_factory=utcnow)


class EndpointKind(Enum):
    LOCAL_SUBPROCESS = "local_subprocess"
    REMOTE_HTTP = "remote_http"


@dataclass
class EndpointRef:
    endpoint_id: str
    kind: EndpointKind
    slots: int = 1
    base_url: str | None = None
    allowed_functions: frozenset[str] | None = None
    registered_by: str = ""
    created_at: datetime = field(default_factory=utcnow)


@dataclass
class FunctionManifest:
    run_id: str
    inputs: dict[str, str]
    kwargs: dict[str, Any]
    output_dir: str
    contact: str = ""

    def to_json(self) -> dict[str, Any]:
        return {
            "run_id": self.run_id,
            "inputs": self.inputs,
            "kwargs": self.kwargs,
            "output_dir": self.output_dir,
            "contact": self.contact,
        }


class ResultStatus(Enum):
    OK = "ok"
    SKIP = "skip"
    ERROR = "error"


@dataclass
class ResultOutput:
    name: str
    path: str
    media_type: str = "application/octet-stream"
    description: str = ""


@dataclass
class ResultManifest:
    status: ResultStatus
    outputs: list[ResultOutput] = field(default_factory=list)
    error: str | None = None
    task_started: datetime | None = None
    task_ended: datetime | None = None

    @classmethod
    def from_json(cls, raw: dict[str, Any]) -> "ResultManifest":
        return cls(
            status=ResultStatus(raw["status"]),
            outputs=[
                ResultOutput(
                    name=o["name"],
                    path=o["path"],
                    media_type=o.get("media_type", "application/octet-stream"),
                    description=o.get("description", ""),
                )
                for o in raw.get("outputs", [])
            ],
            error=raw.get("error"),
            task_started=parse_ts(raw["task_started"]) if raw.get("task_started") else None,
            task_ended=parse_ts(raw["task_ended"]) if raw.get("task_ended") else None,
        )


@dataclass(frozen=True)
class PollingPolicy:
    """Poll wait grows geometrically: interval_k = min(initial * factor**k, cap)."""

    initial: float = 1.0
    factor: float = 1.5
    cap: float = 30.0

    def interval(self, k: int) -> float:
        return min(self.initial * self.factor ** k, self.cap)


@dataclass(frozen=True)
class RetryPolicy:
    """Backoff for transient failures: delay(k) = min(base * factor**(k-1), cap)."""

    max_attempts: int = 4
    base_delay: float = 5.0
    factor: float = 2.0
    max_delay: float = 300.0

    def delay(self, attempt: int) -> float:
        if not 1 <= attempt <= self.max_attempts:
            raise ValueError(f"attempt {attempt} outside 1..{self.max_attempts}")
        return min(self.base_delay * self.factor ** (attempt - 1), self.max_delay)
