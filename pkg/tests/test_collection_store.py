import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aero.errors import Forbidden, UnknownCollection, UnknownKey
from conftest import sha256

# Verified independently with `printf '' | sha256sum` before freezing.
EMPTY_SHA256 = "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"


@pytest.fixture
def owned(store, auth):
    owner = auth.create_principal("owner").principal_id
    return store, owner, store.create_collection(owner)


def test_put_staged_empty_stream(owned):
    store, owner, cid = owned
    staged = store.put_staged(cid, [b""], principal=owner)
    assert staged.size_bytes == 0
    assert staged.checksum == EMPTY_SHA256


def test_put_staged_exact_size_accounting(owned):
    store, owner, cid = owned
    blob = b"\x07" * 1_000_003
    staged = store.put_staged(cid, [blob[:500_000], blob[500_000:]], principal=owner)
    assert staged.size_bytes == len(blob)
    assert staged.checksum == sha256(blob)


def test_put_staged_requires_write(owned, auth):
    store, owner, cid = owned
    stranger = auth.create_principal("stranger").principal_id
    with pytest.raises(Forbidden):
        store.put_staged(cid, [b"data"], principal=stranger)


def test_promote_invalidates_staged_key(owned):
    store, owner, cid = owned
    staged = store.put_staged(cid, [b"payload"])
    key = store.promote(cid, staged.staged_key)
    assert not store.staged_exists(cid, staged.staged_key)
    assert store.read_object_bytes(cid, key, owner) == b"payload"
    with pytest.raises(UnknownKey):
        store.promote(cid, staged.staged_key)


def test_promote_preserves_content(owned):
    store, owner, cid = owned
    blob = bytes(range(256)) * 100
    staged = store.put_staged(cid, [blob])
    key = store.promote(cid, staged.staged_key)
    assert sha256(store.read_object_bytes(cid, key, owner)) == staged.checksum


def test_round_trip_bytes_identical(owned):
    store, owner, cid = owned
    blob = b"round trip body" * 97
    key = store.promote(cid, store.put_staged(cid, [blob]).staged_key)
    assert store.read_object_bytes(cid, key, owner) == blob


def test_get_object_forbidden_without_read(owned, auth):
    store, owner, cid = owned
    stranger = auth.create_principal("stranger").principal_id
    key = store.promote(cid, store.put_staged(cid, [b"secret"]).staged_key)
    with pytest.raises(Forbidden):
        store.read_object_bytes(cid, key, stranger)
    with pytest.raises(Forbidden):
        store.read_object_bytes(cid, key, None)


def test_grant_and_revoke_cycle(owned, auth):
    store, owner, cid = owned
    reader = auth.create_principal("reader").principal_id
    key = store.promote(cid, store.put_staged(cid, [b"shared"]).staged_key)

    store.grant(cid, reader, {"read"}, caller=owner)
    assert store.read_object_bytes(cid, key, reader) == b"shared"

    store.revoke(cid, reader, {"read"}, caller=owner)
    with pytest.raises(Forbidden):
        store.read_object_bytes(cid, key, reader)


def test_grant_requires_admin(owned, auth):
    store, owner, cid = owned
    interloper = auth.create_principal("interloper").principal_id
    with pytest.raises(Forbidden):
        store.grant(cid, interloper, {"read"}, caller=interloper)


def test_namespace_is_flat_uuid_keys(owned):
    store, owner, cid = owned
    for i in range(4):
        store.promote(cid, store.put_staged(cid, [f"obj {i}".encode()]).staged_key)
    keys = store.list_objects(cid)
    assert len(keys) == 4
    for key in keys:
        # uuid4 text: 36 chars, 4 dashes, no user-supplied names
        assert len(key) == 36 and key.count("-") == 4


def test_unknown_collection(store):
    with pytest.raises(UnknownCollection):
        store.put_staged("no-such-collection", [b"x"])


def test_staging_gc_removes_only_expired(owned):
    store, owner, cid = owned
    old = store.put_staged(cid, [b"old"])
    fresh = store.put_staged(cid, [b"fresh"])
    # age the first object artificially
    import os

    path = store.root / cid / "staging" / old.staged_key
    past = time.time() - 100_000
    os.utime(path, (past, past))
    removed = store.gc_staging(ttl_s=24 * 3600)
    assert removed == 1
    assert not store.staged_exists(cid, old.staged_key)
    assert store.staged_exists(cid, fresh.staged_key)


@settings(max_examples=30, deadline=None)
@given(blob=st.binary(min_size=0, max_size=4096))
def test_checksum_matches_reference_hash(tmp_path_factory, blob):
    # fresh store per example; hypothesis drives content
    from aero.auth import AclStore, AuthStore
    from aero.collection_store import CollectionStore
    from aero.db import Database

    root = tmp_path_factory.mktemp("prop")
    db = Database(":memory:")
    store = CollectionStore(root, db, AclStore(db))
    owner = AuthStore(db).create_principal("p").principal_id
    cid = store.create_collection(owner)
    staged = store.put_staged(cid, [blob])
    assert staged.checksum == sha256(blob)
    assert staged.size_bytes == len(blob)
    db.close()
