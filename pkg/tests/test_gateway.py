"""Gateway API tests against a live embedded service (real loopback HTTP)."""

import sys
import time

import httpx
import pytest

from aero.bench import NOOP_TRANSFORM, StaticSourceServer
from aero.client import AeroClient, ApiError
from aero.service import AeroService, Config

TERMINAL = {"succeeded", "skipped", "failed_transient", "failed_terminal"}


@pytest.fixture(scope="module")
def env(tmp_path_factory):
    root = tmp_path_factory.mktemp("gateway-env")
    source = StaticSourceServer(b"gateway source bytes " * 64)
    source.start()
    service = AeroService(Config(
        state_dir=root / "state",
        bind="127.0.0.1:0",
        collection_bind="127.0.0.1:0",
    ))
    service.start()
    script = root / "noop.py"
    script.write_text(NOOP_TRANSFORM)
    admin = AeroClient(service.gateway_url, token=service.admin_token)
    yield {
        "service": service,
        "source": source,
        "admin": admin,
        "noop_entry": f"{sys.executable} {script}",
    }
    admin.close()
    service.stop()
    source.stop()


@pytest.fixture()
def admin(env):
    return env["admin"]


def _wait_terminal(client, flow_id, timeout=30):
    deadline = time.time() + timeout
    while time.time() < deadline:
        runs = client.list_runs(flow_id)
        if runs and runs[-1]["status"] in TERMINAL:
            return runs[-1]
        time.sleep(0.1)
    raise TimeoutError(f"flow {flow_id} never finished")


def _fresh_user(admin, env, name):
    created = admin.create_token(name)
    return AeroClient(env["service"].gateway_url, token=created["token"]), created["principal_id"]


def test_healthz_anonymous(env):
    assert httpx.get(env["service"].gateway_url + "/healthz").json() == {"ok": True}


def test_token_issuance_requires_admin(admin, env):
    user, _ = _fresh_user(admin, env, "nonadmin")
    try:
        with pytest.raises(ApiError) as err:
            user.create_token("escalation")
        assert err.value.http_status == 403
    finally:
        user.close()


def test_missing_token_is_401_with_challenge(env):
    response = httpx.post(env["service"].gateway_url + "/v1/assets", json={})
    assert response.status_code == 401
    assert "bearer" in response.headers.get("WWW-Authenticate", "").lower()
    body = response.json()
    assert set(body) == {"code", "message"}


def test_garbage_token_is_401(env):
    response = httpx.post(
        env["service"].gateway_url + "/v1/collections",
        headers={"Authorization": "Bearer garbage"},
    )
    assert response.status_code == 401


def test_asset_version_flow_lifecycle(admin, env):
    collection = admin.create_collection()["collection_id"]
    fn = admin.register_function(env["noop_entry"])
    ep = admin.register_endpoint(slots=2)
    asset = admin.create_asset("lifecycle-src", collection, tags=["gw"],
                               source_url=env["source"].url)

    flow = admin.register_flow({
        "kind": "ingestion",
        "function_ref": fn,
        "endpoint_ref": ep,
        "inputs": {},
        "outputs": {"data": {"asset_id": asset}},
        "kwargs": {},
        "rule": {"kind": "periodic", "interval_s": 3600},
        "contact": "ops@example.org",
    })
    assert admin.dispatch_flow(flow["flow_id"]) is True
    run = _wait_terminal(admin, flow["flow_id"])
    assert run["status"] == "succeeded"

    meta = admin.get_version(asset, "latest")
    assert meta["version"] == 1
    assert meta["download_url"].startswith(env["service"].collection_base_url())
    # download URL must not point at the gateway
    assert not meta["download_url"].startswith(env["service"].gateway_url)

    got = admin.get_asset(asset)
    assert got["version_count"] == 1
    assert got["last_polled_at"] is not None

    tree = admin.provenance(asset, 1)
    assert tree["asset_id"] == asset and tree["children"] == []


def test_duplicate_flow_is_409(admin, env):
    collection = admin.create_collection()["collection_id"]
    fn = admin.register_function(env["noop_entry"])
    ep = admin.register_endpoint(slots=1)
    asset = admin.create_asset("dup-src", collection, source_url=env["source"].url)
    body = {
        "kind": "ingestion",
        "function_ref": fn,
        "endpoint_ref": ep,
        "inputs": {},
        "outputs": {"data": {"asset_id": asset}},
        "kwargs": {"nonce": 42},
        "rule": {"kind": "periodic", "interval_s": 3600},
        "contact": "",
    }
    admin.register_flow(body)
    with pytest.raises(ApiError) as err:
        admin.register_flow(body)
    assert err.value.http_status == 409

    body2 = dict(body, kwargs={"nonce": 43})
    assert "flow_id" in admin.register_flow(body2)


def test_error_body_shape_uniform(admin, env):
    response = httpx.get(
        env["service"].gateway_url + "/v1/assets/does-not-exist",
        headers={"Authorization": f"Bearer {env['service'].admin_token}"},
    )
    assert response.status_code == 404
    assert set(response.json()) == {"code", "message"}


def test_stranger_cannot_see_flow_or_runs(admin, env):
    collection = admin.create_collection()["collection_id"]
    fn = admin.register_function(env["noop_entry"])
    ep = admin.register_endpoint(slots=1)
    asset = admin.create_asset("private-flow-src", collection, source_url=env["source"].url)
    flow = admin.register_flow({
        "kind": "ingestion", "function_ref": fn, "endpoint_ref": ep,
        "inputs": {}, "outputs": {"data": {"asset_id": asset}},
        "kwargs": {"nonce": "viz"}, "rule": {"kind": "periodic", "interval_s": 3600},
        "contact": "",
    })
    stranger, stranger_id = _fresh_user(admin, env, "flow-stranger")
    try:
        with pytest.raises(ApiError) as err:
            stranger.list_runs(flow["flow_id"])
        assert err.value.http_status == 403
        # view_runs grant opens both the flow record and its runs
        admin.update_acl("flow", flow["flow_id"], stranger_id, ["view_runs"])
        assert stranger.list_runs(flow["flow_id"]) == []
        assert stranger.get_flow(flow["flow_id"])["flow_id"] == flow["flow_id"]
    finally:
        stranger.close()


def test_two_layer_acl_metadata_visible_download_forbidden(admin, env):
    """Read on the asset shows metadata; the collection server still refuses
    the bytes until collection read is granted."""
    collection = admin.create_collection()["collection_id"]
    fn = admin.register_function(env["noop_entry"])
    ep = admin.register_endpoint(slots=1)
    asset = admin.create_asset("two-layer-src", collection, source_url=env["source"].url)
    flow = admin.register_flow({
        "kind": "ingestion", "function_ref": fn, "endpoint_ref": ep,
        "inputs": {}, "outputs": {"data": {"asset_id": asset}},
        "kwargs": {"nonce": "2layer"}, "rule": {"kind": "periodic", "interval_s": 3600},
        "contact": "",
    })
    admin.dispatch_flow(flow["flow_id"])
    assert _wait_terminal(admin, flow["flow_id"])["status"] == "succeeded"

    reader, reader_id = _fresh_user(admin, env, "metadata-reader")
    try:
        admin.update_acl("asset", asset, reader_id, ["read"])
        meta = reader.get_version(asset, "latest")  # metadata layer: allowed
        response = httpx.get(meta["download_url"],
                             headers={"Authorization": f"Bearer {reader.token}"})
        assert response.status_code == 403  # object layer: still denied

        admin.update_acl("collection", collection, reader_id, ["read"])
        response = httpx.get(meta["download_url"],
                             headers={"Authorization": f"Bearer {reader.token}"})
        assert response.status_code == 200
    finally:
        reader.close()


def test_acl_revocation_applies_immediately(admin, env):
    collection = admin.create_collection()["collection_id"]
    asset = admin.create_asset("revoke-src", collection)
    reader, reader_id = _fresh_user(admin, env, "revoked-reader")
    try:
        admin.update_acl("asset", asset, reader_id, ["read"])
        assert reader.get_asset(asset)["asset_id"] == asset
        admin.update_acl("asset", asset, reader_id, ["read"], mode="revoke")
        with pytest.raises(ApiError) as err:
            reader.get_asset(asset)
        assert err.value.http_status == 403
    finally:
        reader.close()


def test_anonymous_search_sees_only_public(admin, env):
    collection = admin.create_collection()["collection_id"]
    fn = admin.register_function(env["noop_entry"])
    ep = admin.register_endpoint(slots=1)
    public_asset = admin.create_asset("public-weather-data", collection,
                                      tags=["anonweather"], source_url=env["source"].url)
    private_asset = admin.create_asset("private-weather-data", collection,
                                       tags=["anonweather"], source_url=env["source"].url)
    for i, asset in enumerate([public_asset, private_asset]):
        flow = admin.register_flow({
            "kind": "ingestion", "function_ref": fn, "endpoint_ref": ep,
            "inputs": {}, "outputs": {"data": {"asset_id": asset}},
            "kwargs": {"nonce": f"anon{i}"}, "rule": {"kind": "periodic", "interval_s": 3600},
            "contact": "",
        })
        admin.dispatch_flow(flow["flow_id"])
        _wait_terminal(admin, flow["flow_id"])
    admin.update_acl("asset", public_asset, "*", ["read"])

    anonymous = AeroClient(env["service"].gateway_url, token=None)
    try:
        hits = anonymous.search(tags=["anonweather"])
        assert [h["asset_id"] for h in hits] == [public_asset]
    finally:
        anonymous.close()


def test_anonymous_fuzz_only_whitelisted_routes_succeed(env):
    """No route leaks data anonymously except the explicit whitelist."""
    whitelist_prefixes = ("/healthz", "/v1/search", "/docs", "/openapi.json")
    app = env["service"].app
    base = env["service"].gateway_url
    for route in app.routes:
        path = getattr(route, "path", None)
        methods = getattr(route, "methods", None)
        if not path or not methods:
            continue
        concrete = path
        for param in ("asset_id", "flow_id", "selector", "version"):
            concrete = concrete.replace("{" + param + "}", "1")
        for method in methods:
            if method in ("HEAD", "OPTIONS"):
                continue
            response = httpx.request(method, base + concrete, json={})
            if any(concrete.startswith(p) for p in whitelist_prefixes):
                assert response.status_code < 500
            else:
                assert response.status_code == 401, (method, concrete, response.status_code)


def test_api_responses_never_carry_object_bytes(admin, env):
    """Version metadata returns URLs, not content: nothing in the gateway
    response body matches the stored payload."""
    collection = admin.create_collection()["collection_id"]
    fn = admin.register_function(env["noop_entry"])
    ep = admin.register_endpoint(slots=1)
    asset = admin.create_asset("nobytes-src", collection, source_url=env["source"].url)
    flow = admin.register_flow({
        "kind": "ingestion", "function_ref": fn, "endpoint_ref": ep,
        "inputs": {}, "outputs": {"data": {"asset_id": asset}},
        "kwargs": {"nonce": "nobytes"}, "rule": {"kind": "periodic", "interval_s": 3600},
        "contact": "",
    })
    admin.dispatch_flow(flow["flow_id"])
    _wait_terminal(admin, flow["flow_id"])
    response = httpx.get(
        env["service"].gateway_url + f"/v1/assets/{asset}/versions/latest",
        headers={"Authorization": f"Bearer {env['service'].admin_token}"},
    )
    assert response.status_code == 200
    assert b"gateway source bytes" not in response.content
    assert response.json()["download_url"].startswith(env["service"].collection_base_url())


def test_collection_server_head_reports_size_and_checksum(admin, env):
    collection = admin.create_collection()["collection_id"]
    fn = admin.register_function(env["noop_entry"])
    ep = admin.register_endpoint(slots=1)
    asset = admin.create_asset("head-src", collection, source_url=env["source"].url)
    flow = admin.register_flow({
        "kind": "ingestion", "function_ref": fn, "endpoint_ref": ep,
        "inputs": {}, "outputs": {"data": {"asset_id": asset}},
        "kwargs": {"nonce": "head"}, "rule": {"kind": "periodic", "interval_s": 3600},
        "contact": "",
    })
    admin.dispatch_flow(flow["flow_id"])
    _wait_terminal(admin, flow["flow_id"])
    meta = admin.get_version(asset, "latest")
    response = httpx.head(meta["download_url"],
                          headers={"Authorization": f"Bearer {env['service'].admin_token}"})
    assert response.status_code == 200
    assert int(response.headers["Content-Length"]) == meta["size_bytes"]
    assert response.headers["X-Object-Sha256"] == meta["checksum"]


def test_collection_server_range_request(admin, env):
    collection = admin.create_collection()["collection_id"]
    fn = admin.register_function(env["noop_entry"])
    ep = admin.register_endpoint(slots=1)
    asset = admin.create_asset("range-src", collection, source_url=env["source"].url)
    flow = admin.register_flow({
        "kind": "ingestion", "function_ref": fn, "endpoint_ref": ep,
        "inputs": {}, "outputs": {"data": {"asset_id": asset}},
        "kwargs": {"nonce": "range"}, "rule": {"kind": "periodic", "interval_s": 3600},
        "contact": "",
    })
    admin.dispatch_flow(flow["flow_id"])
    _wait_terminal(admin, flow["flow_id"])
    meta = admin.get_version(asset, "latest")
    headers = {"Authorization": f"Bearer {env['service'].admin_token}", "Range": "bytes=0-9"}
    response = httpx.get(meta["download_url"], headers=headers)
    assert response.status_code == 206
    assert response.content == env["source"].payload[:10]
    assert response.headers["Content-Range"].startswith("bytes 0-9/")


def test_collection_server_401_challenge_without_token(admin, env):
    collection = admin.create_collection()["collection_id"]
    fn = admin.register_function(env["noop_entry"])
    ep = admin.register_endpoint(slots=1)
    asset = admin.create_asset("challenge-src", collection, source_url=env["source"].url)
    flow = admin.register_flow({
        "kind": "ingestion", "function_ref": fn, "endpoint_ref": ep,
        "inputs": {}, "outputs": {"data": {"asset_id": asset}},
        "kwargs": {"nonce": "401"}, "rule": {"kind": "periodic", "interval_s": 3600},
        "contact": "",
    })
    admin.dispatch_flow(flow["flow_id"])
    _wait_terminal(admin, flow["flow_id"])
    meta = admin.get_version(asset, "latest")
    response = httpx.get(meta["download_url"])  # no Authorization header
    assert response.status_code == 401
    assert "bearer" in response.headers.get("WWW-Authenticate", "").lower()
    response = httpx.get(meta["download_url"], headers={"Authorization": "Bearer revoked-or-bad"})
    assert response.status_code == 401


def test_flow_registration_needs_execute_on_endpoint(admin, env):
    collection = admin.create_collection()["collection_id"]
    fn = admin.register_function(env["noop_entry"])
    ep = admin.register_endpoint(slots=1)
    user, user_id = _fresh_user(admin, env, "endpoint-borrower")
    try:
        admin.update_acl("collection", collection, user_id, ["write"])
        asset = user.create_asset("borrowed-endpoint-src", collection,
                                  source_url=env["source"].url)
        body = {
            "kind": "ingestion", "function_ref": fn, "endpoint_ref": ep,
            "inputs": {}, "outputs": {"data": {"asset_id": asset}},
            "kwargs": {}, "rule": {"kind": "periodic", "interval_s": 3600},
            "contact": "",
        }
        with pytest.raises(ApiError) as err:
            user.register_flow(body)
        assert err.value.http_status == 403

        admin.update_acl("endpoint", ep, user_id, ["execute"])
        assert "flow_id" in user.register_flow(body)
    finally:
        user.close()
