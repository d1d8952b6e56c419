import hashlib
import json
import sys
import time

import pytest

from aero.bench import NOOP_TRANSFORM, StaticSourceServer
from aero.cli import main
from aero.client import AeroClient
from aero.service import AeroService, Config

TERMINAL = {"succeeded", "skipped", "failed_transient", "failed_terminal"}


@pytest.fixture(scope="module")
def env(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli-env")
    source = StaticSourceServer(b"cli packet " * 200)
    source.start()
    service = AeroService(Config(
        state_dir=root / "state", bind="127.0.0.1:0", collection_bind="127.0.0.1:0",
    ))
    service.start()
    script = root / "noop.py"
    script.write_text(NOOP_TRANSFORM)
    client = AeroClient(service.gateway_url, token=service.admin_token)
    collection = client.create_collection()["collection_id"]
    fn = client.register_function(f"{sys.executable} {script}")
    ep = client.register_endpoint(slots=2)
    yield {
        "service": service, "source": source, "client": client,
        "collection": collection, "fn": fn, "ep": ep, "root": root,
    }
    client.close()
    service.stop()
    source.stop()


def _cli(env, *args):
    return main(["--server", env["service"].gateway_url,
                 "--token", env["service"].admin_token, *args])


def _wait_terminal(client, flow_id, timeout=30):
    deadline = time.time() + timeout
    while time.time() < deadline:
        runs = client.list_runs(flow_id)
        if runs and runs[-1]["status"] in TERMINAL:
            return runs[-1]
        time.sleep(0.1)
    raise TimeoutError


def test_register_source_prints_asset_id(env, capsys):
    rc = _cli(env, "register-source", "--name", "cli-source", "--collection",
              env["collection"], "--url", env["source"].url, "--tags", "cli,demo")
    assert rc == 0
    asset_id = capsys.readouterr().out.strip()
    assert env["client"].get_asset(asset_id)["name"] == "cli-source"


def test_register_flow_from_spec_file(env, capsys, tmp_path):
    asset_id = env["client"].create_asset("cli-flow-src", env["collection"],
                                          source_url=env["source"].url)
    spec_path = tmp_path / "flow.json"
    spec_path.write_text(json.dumps({
        "kind": "ingestion",
        "function_ref": env["fn"],
        "endpoint_ref": env["ep"],
        "inputs": {},
        "outputs": {"data": {"asset_id": asset_id}},
        "kwargs": {"nonce": "cli"},
        "rule": {"kind": "periodic", "interval_s": 3600},
        "contact": "cli@example.org",
    }))
    rc = _cli(env, "register-flow", str(spec_path))
    assert rc == 0
    flow_id = capsys.readouterr().out.strip()
    assert env["client"].get_flow(flow_id)["kind"] == "ingestion"
    env["_flow_id"] = flow_id
    env["_asset_id"] = asset_id


def test_fetch_writes_verified_bytes(env, capsys, tmp_path):
    flow_id, asset_id = env["_flow_id"], env["_asset_id"]
    env["client"].dispatch_flow(flow_id)
    assert _wait_terminal(env["client"], flow_id)["status"] == "succeeded"

    out = tmp_path / "fetched.bin"
    rc = _cli(env, "fetch", asset_id, "--version", "latest", "-o", str(out))
    assert rc == 0
    assert out.read_bytes() == env["source"].payload
    meta = env["client"].get_version(asset_id)
    assert hashlib.sha256(out.read_bytes()).hexdigest() == meta["checksum"]
    assert "verified" in capsys.readouterr().out


def test_runs_table_lists_run(env, capsys):
    rc = _cli(env, "runs", env["_flow_id"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "succeeded" in out


def test_search_table_and_json(env, capsys):
    rc = _cli(env, "search", "cli-flow-src")
    assert rc == 0
    assert "cli-flow-src" in capsys.readouterr().out

    rc = _cli(env, "search", "cli-flow-src", "--json")
    assert rc == 0
    hits = json.loads(capsys.readouterr().out)
    assert any(h["asset_id"] == env["_asset_id"] for h in hits)


def test_provenance_json_matches_api(env, capsys):
    rc = _cli(env, "provenance", env["_asset_id"], "1", "--json")
    assert rc == 0
    cli_tree = json.loads(capsys.readouterr().out)
    api_tree = env["client"].provenance(env["_asset_id"], 1)
    assert cli_tree == api_tree


def test_token_create(env, capsys):
    rc = _cli(env, "token", "create", "--name", "colleague")
    assert rc == 0
    created = json.loads(capsys.readouterr().out)
    probe = AeroClient(env["service"].gateway_url, token=created["token"])
    try:
        assert probe.create_collection()["collection_id"]
    finally:
        probe.close()


def test_api_error_exits_one(env, capsys):
    rc = _cli(env, "runs", "no-such-flow")
    assert rc == 1
    assert "error" in capsys.readouterr().err.lower()


def test_usage_error_exits_two(env):
    with pytest.raises(SystemExit) as exc:
        main(["register-source"])  # missing required options
    assert exc.value.code == 2


def test_openapi_generation(env, tmp_path, capsys):
    out = tmp_path / "openapi.json"
    rc = main(["openapi", "--out", str(out)])
    assert rc == 0
    spec = json.loads(out.read_text())
    paths = set(spec["paths"])
    for expected in ("/v1/assets", "/v1/flows", "/v1/search",
                     "/v1/provenance/{asset_id}/{version}", "/v1/tokens", "/v1/acl"):
        assert expected in paths


def test_unreachable_server_exits_one(capsys):
    rc = main(["--server", "http://127.0.0.1:9", "--token", "x", "search", "anything"])
    assert rc == 1
    assert "error" in capsys.readouterr().err.lower()


def test_provenance_text_tree(env, capsys):
    rc = _cli(env, "provenance", env["_asset_id"], "1")
    assert rc == 0
    out = capsys.readouterr().out
    assert f"{env['_asset_id']}@1" in out
    assert "(leaf)" in out
