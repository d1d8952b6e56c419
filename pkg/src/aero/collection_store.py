"""User-side object storage.

A collection is a flat namespace of immutable objects addressed by opaque
UUID keys; user filenames never appear on disk. Writes land in a staging
area first and are promoted into the persistent area by the registry's
commit pipeline. Both moves are write-to-temp-then-rename, so readers
never observe partial objects.

On-disk layout:
    <root>/<collection_id>/staging/<key>
    <root>/<collection_id>/objects/<key>
"""

from __future__ import annotations

import errno
import hashlib
import os
import shutil
import time
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator

from .auth import AclStore
from .db import Database
from .errors import DiskFull, Forbidden, UnknownCollection, UnknownKey
from .model import isots, new_id, parse_ts, utcnow

_CHUNK = 1 << 20

STAGING_TTL_S = 24 * 3600.0


@dataclass
class StagedObject:
    staged_key: str
    checksum: str
    size_bytes: int


@dataclass
class Collection:
    collection_id: str
    owner: str
    created_at: datetime


def _copy_hash(src: Iterable[bytes], dest: BinaryIO) -> tuple[str, int]:
    digest = hashlib.sha256()
    size = 0
    for chunk in src:
        digest.update(chunk)
        size += len(chunk)
        dest.write(chunk)
    return digest.hexdigest(), size


def hash_file(path: str | Path) -> tuple[str, int]:
    digest = hashlib.sha256()
    size = 0
    with open(path, "rb") as f:
        while True:
            chunk = f.read(_CHUNK)
            if not chunk:
                break
            digest.update(chunk)
            size += len(chunk)
    return digest.hexdigest(), size


class CollectionStore:
    """Disk-backed collections with per-collection ACLs."""

    def __init__(self, root: str | Path, db: Database, acl: AclStore):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._db = db
        self._acl = acl

    # -- lifecycle -----------------------------------------------------------

    def create_collection(self, owner: str) -> str:
        collection_id = new_id()
        with self._db.transaction() as cur:
            cur.execute(
                "INSERT INTO collections (collection_id, owner, created_at) VALUES (?, ?, ?)",
                (collection_id, owner, isots(utcnow())),
            )
        (self.root / collection_id / "staging").mkdir(parents=True)
        (self.root / collection_id / "objects").mkdir(parents=True)
        return collection_id

    def get_collection(self, collection_id: str) -> Collection:
        row = self._db.query_one(
            "SELECT * FROM collections WHERE collection_id = ?", (collection_id,)
        )
        if row is None:
            raise UnknownCollection(collection_id)
        return Collection(row["collection_id"], row["owner"], parse_ts(row["created_at"]))

    # -- permissions -----------------------------------------------------------

    def check(self, collection_id: str, principal: str | None, perm: str) -> None:
        owner = self.get_collection(collection_id).owner
        if not self._acl.allows(principal, "collection", collection_id, perm, owner=owner):
            raise Forbidden(f"{perm} denied on collection {collection_id}")

    def grant(self, collection_id: str, principal: str, perms: set[str], caller: str) -> None:
        self.check(collection_id, caller, "admin")
        self._acl.grant("collection", collection_id, principal, perms)

    def revoke(self, collection_id: str, principal: str, perms: set[str], caller: str) -> None:
        self.check(collection_id, caller, "admin")
        self._acl.revoke("collection", collection_id, principal, perms)

    # -- staging ---------------------------------------------------------------

    def put_staged(
        self, collection_id: str, stream: Iterable[bytes], principal: str | None = None
    ) -> StagedObject:
        """Stream bytes into the staging area; returns key, checksum, size."""
        if principal is not None:
            self.check(collection_id, principal, "write")
        staging = self._staging_dir(collection_id)
        key = new_id()
        tmp = staging / f".tmp-{key}"
        try:
            with open(tmp, "wb") as f:
                checksum, size = _copy_hash(stream, f)
            os.rename(tmp, staging / key)
        except OSError as exc:
            tmp.unlink(missing_ok=True)
            if exc.errno == errno.ENOSPC:
                raise DiskFull(str(exc)) from exc
            raise
        return StagedObject(staged_key=key, checksum=checksum, size_bytes=size)

    def put_staged_from_path(
        self, collection_id: str, path: str | Path, principal: str | None = None
    ) -> StagedObject:
        """Adopt a local file into staging, renaming when on the same
        filesystem. The source path is consumed."""
        if principal is not None:
            self.check(collection_id, principal, "write")
        staging = self._staging_dir(collection_id)
        checksum, size = hash_file(path)
        key = new_id()
        try:
            os.rename(path, staging / key)
        except OSError:
            shutil.copyfile(path, staging / key)
            os.unlink(path)
        return StagedObject(staged_key=key, checksum=checksum, size_bytes=size)

    def promote(self, collection_id: str, staged_key: str) -> str:
        """Move a staged object into the persistent namespace under a fresh
        key; the staged key is invalid afterwards."""
        src = self._staging_dir(collection_id) / staged_key
        if not src.is_file():
            raise UnknownKey(f"no staged object {staged_key}")
        storage_key = new_id()
        os.rename(src, self._objects_dir(collection_id) / storage_key)
        return storage_key

    def discard_staged(self, collection_id: str, staged_key: str) -> None:
        src = self._staging_dir(collection_id) / staged_key
        src.unlink(missing_ok=True)

    def staged_exists(self, collection_id: str, staged_key: str) -> bool:
        return (self._staging_dir(collection_id) / staged_key).is_file()

    def gc_staging(self, ttl_s: float = STAGING_TTL_S, now: float | None = None) -> int:
        """Drop staged objects older than the TTL; returns how many."""
        now = time.time() if now is None else now
        removed = 0
        for row in self._db.query("SELECT collection_id FROM collections"):
            staging = self.root / row["collection_id"] / "staging"
            if not staging.is_dir():
                continue
            for entry in staging.iterdir():
                if now - entry.stat().st_mtime > ttl_s:
                    entry.unlink(missing_ok=True)
                    removed += 1
        return removed

    # -- reads -------------------------------------------------------------------

    def get_object(
        self, collection_id: str, storage_key: str, principal: str | None
    ) -> Iterator[bytes]:
        self.check(collection_id, principal, "read")
        return self._read(self.object_path(collection_id, storage_key))

    def read_object_bytes(self, collection_id: str, storage_key: str, principal: str | None) -> bytes:
        return b"".join(self.get_object(collection_id, storage_key, principal))

    def export_object(
        self, collection_id: str, storage_key: str, dest: str | Path,
        principal: str | None = None,
    ) -> None:
        """Copy an object to ``dest``. A real copy, not a link: staged inputs
        belong to the run and must not alias the immutable object."""
        if principal is not None:
            self.check(collection_id, principal, "read")
        shutil.copyfile(self.object_path(collection_id, storage_key), dest)

    def object_path(self, collection_id: str, storage_key: str) -> Path:
        path = self._objects_dir(collection_id) / storage_key
        if not path.is_file():
            raise UnknownKey(f"no object {storage_key} in collection {collection_id}")
        return path

    def object_size(self, collection_id: str, storage_key: str) -> int:
        return self.object_path(collection_id, storage_key).stat().st_size

    def list_objects(self, collection_id: str) -> list[str]:
        objects = self._objects_dir(collection_id)
        return sorted(p.name for p in objects.iterdir() if p.is_file())

    # -- internals ------------------------------------------------------------------

    def _staging_dir(self, collection_id: str) -> Path:
        path = self.root / collection_id / "staging"
        if not path.is_dir():
            raise UnknownCollection(collection_id)
        return path

    def _objects_dir(self, collection_id: str) -> Path:
        path = self.root / collection_id / "objects"
        if not path.is_dir():
            raise UnknownCollection(collection_id)
        return path

    @staticmethod
    def _read(path: Path) -> Iterator[bytes]:
        with open(path, "rb") as f:
            while True:
                chunk = f.read(_CHUNK)
                if not chunk:
                    return
                yield chunk
