import pytest

from aero.auth import PUBLIC
from aero.errors import Forbidden, Unauthenticated


def test_token_round_trip(auth):
    principal = auth.create_principal("alice")
    token = auth.issue_token(principal.principal_id)
    assert auth.authenticate(token).principal_id == principal.principal_id


def test_missing_token_rejected(auth):
    with pytest.raises(Unauthenticated):
        auth.authenticate(None)
    with pytest.raises(Unauthenticated):
        auth.authenticate("")


def test_unknown_token_rejected(auth):
    with pytest.raises(Unauthenticated):
        auth.authenticate("not-a-real-token")


def test_revoked_token_never_authenticates_again(auth):
    principal = auth.create_principal("alice")
    token = auth.issue_token(principal.principal_id)
    assert auth.revoke_token(token) is True
    with pytest.raises(Unauthenticated):
        auth.authenticate(token)
    # revoking again is a no-op, not a resurrection
    auth.revoke_token(token)
    with pytest.raises(Unauthenticated):
        auth.authenticate(token)


def test_tokens_stored_only_hashed(auth, db):
    principal = auth.create_principal("alice")
    token = auth.issue_token(principal.principal_id)
    rows = db.query("SELECT * FROM tokens")
    assert len(rows) == 1
    assert token not in (rows[0]["token_hash"], rows[0]["salt"])


def test_owner_always_allowed(acl):
    assert acl.allows("alice", "asset", "a1", "admin", owner="alice")
    assert acl.allows("alice", "asset", "a1", "read", owner="alice")


def test_grant_and_revoke(acl):
    acl.grant("asset", "a1", "bob", {"read"})
    assert acl.allows("bob", "asset", "a1", "read")
    assert not acl.allows("bob", "asset", "a1", "write")
    acl.revoke("asset", "a1", "bob", {"read"})
    assert not acl.allows("bob", "asset", "a1", "read")


def test_admin_grant_implies_everything(acl):
    acl.grant("flow", "f1", "bob", {"admin"})
    for perm in ("read", "write", "execute", "view_runs", "admin"):
        assert acl.allows("bob", "flow", "f1", perm)


def test_public_grant_covers_anonymous(acl):
    acl.grant("asset", "a1", PUBLIC, {"read"})
    assert acl.allows(None, "asset", "a1", "read")
    assert acl.allows("anyone", "asset", "a1", "read")


def test_unknown_perm_rejected(acl):
    with pytest.raises(ValueError):
        acl.grant("asset", "a1", "bob", {"fly"})


def test_require_raises_forbidden(acl):
    with pytest.raises(Forbidden):
        acl.require("bob", "asset", "a1", "read", owner="alice")
