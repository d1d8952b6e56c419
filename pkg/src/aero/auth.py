"""Principals, bearer tokens, and resource ACLs.

Tokens are verified only by salted hash; the raw secret is returned once at
issue time and never stored. Authorization is owner-or-grant: the owner of
a resource implicitly holds admin, an ``admin`` grant implies every other
action, and the wildcard principal ``*`` makes a grant public (including
anonymous callers).
"""

from __future__ import annotations

import hashlib
import secrets
from dataclasses import dataclass
from datetime import datetime

from .db import Database
from .errors import Forbidden, Unauthenticated
from .model import isots, new_id, parse_ts, utcnow

PUBLIC = "*"

PERMS = {"read", "write", "execute", "admin", "view_runs"}

RESOURCE_TYPES = {"asset", "flow", "collection", "endpoint"}


@dataclass
class Principal:
    principal_id: str
    display_name: str
    is_admin: bool
    created_at: datetime


def _hash_token(token: str, salt: str) -> str:
    return hashlib.sha256((salt + token).encode()).hexdigest()


class AuthStore:
    """Principal and token persistence plus request authentication."""

    def __init__(self, db: Database):
        self._db = db

    def create_principal(self, display_name: str, is_admin: bool = False) -> Principal:
        principal = Principal(new_id(), display_name, is_admin, utcnow())
        with self._db.transaction() as cur:
            cur.execute(
                "INSERT INTO principals (principal_id, display_name, is_admin, created_at)"
                " VALUES (?, ?, ?, ?)",
                (principal.principal_id, display_name, int(is_admin), isots(principal.created_at)),
            )
        return principal

    def get_principal(self, principal_id: str) -> Principal | None:
        row = self._db.query_one(
            "SELECT * FROM principals WHERE principal_id = ?", (principal_id,)
        )
        if row is None:
            return None
        return Principal(
            row["principal_id"], row["display_name"], bool(row["is_admin"]), parse_ts(row["created_at"])
        )

    def count_principals(self) -> int:
        return self._db.query_one("SELECT COUNT(*) AS n FROM principals")["n"]

    def issue_token(self, principal_id: str) -> str:
        token = secrets.token_urlsafe(32)
        salt = secrets.token_hex(8)
        with self._db.transaction() as cur:
            cur.execute(
                "INSERT INTO tokens (token_hash, salt, principal_id, created_at) VALUES (?, ?, ?, ?)",
                (_hash_token(token, salt), salt, principal_id, isots(utcnow())),
            )
        return token

    def revoke_token(self, token: str) -> bool:
        row = self._find_token(token)
        if row is None:
            return False
        with self._db.transaction() as cur:
            cur.execute(
                "UPDATE tokens SET revoked_at = ? WHERE token_hash = ?",
                (isots(utcnow()), row["token_hash"]),
            )
        return True

    def authenticate(self, token: str | None) -> Principal:
        """Resolve a bearer token; raises Unauthenticated for missing,
        unknown, or revoked tokens."""
        if not token:
            raise Unauthenticated("missing bearer token")
        row = self._find_token(token)
        if row is None or row["revoked_at"] is not None:
            raise Unauthenticated("invalid or revoked token")
        principal = self.get_principal(row["principal_id"])
        if principal is None:
            raise Unauthenticated("token principal no longer exists")
        return principal

    def _find_token(self, token: str):
        for row in self._db.query("SELECT * FROM tokens"):
            if _hash_token(token, row["salt"]) == row["token_hash"]:
                return row
        return None


class AclStore:
    """Grant table over (resource_type, resource_id, principal, perm)."""

    def __init__(self, db: Database):
        self._db = db

    def grant(self, resource_type: str, resource_id: str, principal_id: str, perms: set[str]) -> None:
        bad = perms - PERMS
        if bad:
            raise ValueError(f"unknown permissions: {sorted(bad)}")
        with self._db.transaction() as cur:
            for perm in perms:
                cur.execute(
                    "INSERT OR IGNORE INTO acl (resource_type, resource_id, principal_id, perm)"
                    " VALUES (?, ?, ?, ?)",
                    (resource_type, resource_id, principal_id, perm),
                )

    def revoke(self, resource_type: str, resource_id: str, principal_id: str, perms: set[str]) -> None:
        with self._db.transaction() as cur:
            for perm in perms:
                cur.execute(
                    "DELETE FROM acl WHERE resource_type = ? AND resource_id = ?"
                    " AND principal_id = ? AND perm = ?",
                    (resource_type, resource_id, principal_id, perm),
                )

    def allows(
        self,
        principal_id: str | None,
        resource_type: str,
        resource_id: str,
        perm: str,
        owner: str | None = None,
    ) -> bool:
        if owner is not None and principal_id == owner:
            return True
        holders = [PUBLIC] if principal_id is None else [principal_id, PUBLIC]
        placeholders = ",".join("?" for _ in holders)
        rows = self._db.query(
            f"SELECT perm FROM acl WHERE resource_type = ? AND resource_id = ?"
            f" AND principal_id IN ({placeholders})",
            (resource_type, resource_id, *holders),
        )
        granted = {row["perm"] for row in rows}
        return perm in granted or "admin" in granted

    def require(
        self,
        principal_id: str | None,
        resource_type: str,
        resource_id: str,
        perm: str,
        owner: str | None = None,
    ) -> None:
        if not self.allows(principal_id, resource_type, resource_id, perm, owner=owner):
            raise Forbidden(f"{perm} denied on {resource_type} {resource_id}")

    def readers_of(self, resource_type: str, resource_id: str) -> set[str]:
        """Principals with read visibility (PUBLIC marker included as-is)."""
        rows = self._db.query(
            "SELECT principal_id, perm FROM acl WHERE resource_type = ? AND resource_id = ?"
            " AND perm IN ('read', 'admin')",
            (resource_type, resource_id),
        )
        return {row["principal_id"] for row in rows}
