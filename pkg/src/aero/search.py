"""Free-text and fielded search over committed version metadata.

The index is derived data: the registry feeds it one entry per committed
version and it can always be rebuilt from the registry, so there is no
durable state here. Matching is deliberately simple and deterministic:
lowercase tokens split on non-alphanumerics, ranked by distinct-token hit
count with recency as the tiebreak.
"""

from __future__ import annotations

import re
import threading
from dataclasses import dataclass, field
from datetime import datetime
from typing import Any

from .auth import PUBLIC
from .errors import MalformedFilter
from .model import isots, parse_ts

_TOKEN_RE = re.compile(r"[0-9a-z]+")


def tokenize(text: str) -> set[str]:
    return set(_TOKEN_RE.findall(text.lower()))


@dataclass
class SearchEntry:
    asset_id: str
    version: int
    name: str
    description: str
    original_source: str
    download_url: str
    tags: set[str]
    size_bytes: int
    checksum: str
    created_at: datetime
    provenance_summary: str
    visibility: set[str]
    tokens: set[str] = field(default_factory=set)

    def __post_init__(self):
        if not self.tokens:
            self.tokens = tokenize(self.name) | tokenize(self.description)
            for tag in self.tags:
                self.tokens |= tokenize(tag)

    def visible_to(self, principal: str | None) -> bool:
        if PUBLIC in self.visibility:
            return True
        return principal is not None and principal in self.visibility

    def to_json(self) -> dict[str, Any]:
        return {
            "asset_id": self.asset_id,
            "version": self.version,
            "name": self.name,
            "description": self.description,
            "original_source": self.original_source,
            "download_url": self.download_url,
            "tags": sorted(self.tags),
            "size_bytes": self.size_bytes,
            "checksum": self.checksum,
            "created_at": isots(self.created_at),
            "provenance_summary": self.provenance_summary,
        }


@dataclass
class QueryFilters:
    tags: set[str] = field(default_factory=set)
    asset_id: str | None = None
    date_from: datetime | None = None
    date_to: datetime | None = None

    @classmethod
    def parse(
        cls,
        tags: list[str] | None = None,
        asset_id: str | None = None,
        date_from: str | None = None,
        date_to: str | None = None,
    ) -> "QueryFilters":
        def _ts(raw: str | None, label: str) -> datetime | None:
            if raw is None:
                return None
            try:
                return parse_ts(raw)
            except ValueError as exc:
                raise MalformedFilter(f"bad {label} timestamp: {raw!r}") from exc

        return cls(
            tags=set(tags or []),
            asset_id=asset_id,
            date_from=_ts(date_from, "from"),
            date_to=_ts(date_to, "to"),
        )

    def admits(self, entry: SearchEntry) -> bool:
        if self.tags and not self.tags <= entry.tags:
            return False
        if self.asset_id is not None and entry.asset_id != self.asset_id:
            return False
        if self.date_from is not None and entry.created_at < self.date_from:
            return False
        if self.date_to is not None and entry.created_at > self.date_to:
            return False
        return True


def score(query_tokens: set[str], entry: SearchEntry) -> int:
    return len(query_tokens & entry.tokens)


class SearchIndex:
    """Single-writer in-memory index with snapshot-consistent queries."""

    def __init__(self):
        self._entries: dict[tuple[str, int], SearchEntry] = {}
        self._lock = threading.RLock()

    def index_version(self, entry: SearchEntry) -> tuple[str, int]:
        with self._lock:
            self._entries[(entry.asset_id, entry.version)] = entry
        return (entry.asset_id, entry.version)

    def update_visibility(self, asset_id: str, visibility: set[str]) -> None:
        with self._lock:
            for key, entry in self._entries.items():
                if key[0] == asset_id:
                    entry.visibility = set(visibility)

    def drop_asset(self, asset_id: str) -> None:
        with self._lock:
            for key in [k for k in self._entries if k[0] == asset_id]:
                del self._entries[key]

    def rebuild(self, entries: list[SearchEntry]) -> None:
        with self._lock:
            self._entries = {(e.asset_id, e.version): e for e in entries}

    def entry_count(self) -> int:
        with self._lock:
            return len(self._entries)

    def query(
        self,
        text: str,
        principal: str | None,
        filters: QueryFilters | None = None,
        limit: int = 50,
        offset: int = 0,
    ) -> list[SearchEntry]:
        """Ranked, permission-filtered hits with stable pagination."""
        if limit < 0 or offset < 0:
            raise MalformedFilter("limit and offset must be non-negative")
        filters = filters or QueryFilters()
        query_tokens = tokenize(text)
        with self._lock:
            candidates = list(self._entries.values())
        hits = []
        for entry in candidates:
            if not entry.visible_to(principal):
                continue
            if not filters.admits(entry):
                continue
            s = score(query_tokens, entry)
            if query_tokens and s == 0:
                continue
            hits.append((s, entry))
        hits.sort(
            key=lambda pair: (
                -pair[0],
                -pair[1].created_at.timestamp(),
                pair[1].asset_id,
                -pair[1].version,
            )
        )
        return [entry for _, entry in hits[offset:offset + limit]]
