"""Command-line client and operator tools.

Query/register commands are thin wrappers over the /v1 API; ``serve`` runs
the service in the foreground; ``bench`` drives the synthetic concurrency
benchmark. Exit codes: 0 success, 1 API/runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
from pathlib import Path

from .client import AeroClient, ApiError
from .errors import AeroError

DEFAULT_SERVER = "http://127.0.0.1:8600"


def _client(args) -> AeroClient:
    return AeroClient(args.server, token=args.token)


def _print_table(rows: list[dict], columns: list[str]) -> None:
    if not rows:
        print("(no results)")
        return
    widths = {c: max(len(c), *(len(str(r.get(c, ""))) for r in rows)) for c in columns}
    print("  ".join(c.ljust(widths[c]) for c in columns))
    print("  ".join("-" * widths[c] for c in columns))
    for row in rows:
        print("  ".join(str(row.get(c, "")).ljust(widths[c]) for c in columns))


def cmd_register_source(args) -> int:
    with _client(args) as client:
        asset_id = client.create_asset(
            name=args.name,
            collection_ref=args.collection,
            description=args.description,
            tags=[t for t in (args.tags or "").split(",") if t],
            source_url=args.url,
        )
    print(asset_id)
    return 0


def cmd_register_flow(args) -> int:
    spec = json.loads(Path(args.spec).read_text())
    with _client(args) as client:
        flow = client.register_flow(spec)
    if args.json:
        print(json.dumps(flow, indent=2))
    else:
        print(flow["flow_id"])
    return 0


def cmd_search(args) -> int:
    with _client(args) as client:
        hits = client.search(
            q=args.query, tags=args.tag, asset_id=args.asset,
            limit=args.limit, offset=args.offset,
        )
    if args.json:
        print(json.dumps(hits, indent=2))
        return 0
    rows = [
        {
            "name": h["name"],
            "version": h["version"],
            "asset_id": h["asset_id"],
            "size": h["size_bytes"],
            "tags": ",".join(h["tags"]),
            "created": h["created_at"],
        }
        for h in hits
    ]
    _print_table(rows, ["name", "version", "asset_id", "size", "tags", "created"])
    return 0


def cmd_fetch(args) -> int:
    with _client(args) as client:
        meta = client.fetch(args.asset, args.output, selector=args.version)
    print(f"wrote {meta['size_bytes']} bytes to {args.output} "
          f"(version {meta['version']}, sha256 {meta['checksum'][:16]}… verified)")
    return 0


def cmd_runs(args) -> int:
    with _client(args) as client:
        runs = client.list_runs(args.flow)
    if args.json:
        print(json.dumps(runs, indent=2))
        return 0
    rows = [
        {
            "run_id": r["run_id"],
            "status": r["status"],
            "attempt": r["attempt"],
            "reason": r["reason"],
            "started": r["started_at"],
            "ended": r["ended_at"],
        }
        for r in runs
    ]
    _print_table(rows, ["run_id", "status", "attempt", "reason", "started", "ended"])
    return 0


def _print_tree(node: dict, indent: int = 0) -> None:
    pad = "  " * indent
    origin = f" <- run {node['run_id']}" if node.get("run_id") else " (leaf)"
    print(f"{pad}{node['asset_id']}@{node['version']}{origin}")
    for child in node.get("children", []):
        _print_tree(child, indent + 1)


def cmd_provenance(args) -> int:
    with _client(args) as client:
        tree = client.provenance(args.asset, args.version, depth=args.depth)
    if args.json:
        print(json.dumps(tree, indent=2))
    else:
        _print_tree(tree)
    return 0


def cmd_token(args) -> int:
    with _client(args) as client:
        created = client.create_token(args.name, admin=args.admin)
    print(json.dumps(created, indent=2))
    return 0


def cmd_serve(args) -> int:
    from .service import AeroService, Config

    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    config = Config.load(args.config)
    service = AeroService(config)
    service.start()
    print(f"gateway:           {service.gateway_url}")
    print(f"collection server: {service.collection_base_url()}")
    print(f"admin token file:  {Path(config.state_dir) / 'admin_token'}")

    def _shutdown(signum, frame):
        service._stop.set()

    signal.signal(signal.SIGINT, _shutdown)
    signal.signal(signal.SIGTERM, _shutdown)
    service.wait()
    service.stop()
    return 0


def cmd_bench(args) -> int:
    from .bench import BenchConfig, run_bench

    concurrencies = [int(x) for x in str(args.concurrency).split(",") if x]
    cfg = BenchConfig(
        concurrencies=concurrencies,
        repetitions=args.reps,
        size_bytes=args.size,
        slots=args.slots,
        seed=args.seed,
        server_url=args.server if args.remote else None,
        token=args.token if args.remote else None,
    )
    report = run_bench(cfg, progress=lambda msg: print(msg, file=sys.stderr))
    if args.out:
        report.write(args.out)
        print(f"report written to {args.out} (gnuplot table: {Path(args.out).with_suffix('.dat')})")
    print(report.gnuplot_table(), end="")
    return 0


def cmd_openapi(args) -> int:
    import tempfile

    from .gateway import create_app
    from .service import AeroService, Config

    with tempfile.TemporaryDirectory(prefix="aero-openapi-") as tmp:
        service = AeroService(Config(state_dir=Path(tmp), bind="127.0.0.1:0",
                                     collection_bind="127.0.0.1:0"))
        try:
            spec = create_app(service).openapi()
        finally:
            service.collection_server.stop()
            service.db.close()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(spec, indent=2) + "\n")
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aero",
        description="Client and operator tools for the research data automation service.",
    )
    parser.add_argument("--server", default=os.environ.get("AERO_SERVER", DEFAULT_SERVER),
                        help="gateway base URL (env: AERO_SERVER)")
    parser.add_argument("--token", default=os.environ.get("AERO_TOKEN"),
                        help="bearer token (env: AERO_TOKEN)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("register-source", help="register an externally sourced asset")
    p.add_argument("--name", required=True)
    p.add_argument("--description", default="")
    p.add_argument("--tags", default="", help="comma-separated tags")
    p.add_argument("--collection", required=True, help="collection id")
    p.add_argument("--url", required=True, help="HTTP(S) source URL")
    p.set_defaults(func=cmd_register_source)

    p = sub.add_parser("register-flow", help="register a flow from a JSON spec file")
    p.add_argument("spec", help="path to flow spec JSON")
    p.add_argument("--json", action="store_true", help="print the full flow record")
    p.set_defaults(func=cmd_register_flow)

    p = sub.add_parser("search", help="search committed version metadata")
    p.add_argument("query", nargs="?", default="")
    p.add_argument("--tag", action="append", default=[])
    p.add_argument("--asset", default=None)
    p.add_argument("--limit", type=int, default=50)
    p.add_argument("--offset", type=int, default=0)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("fetch", help="download a version directly from its collection server")
    p.add_argument("asset")
    p.add_argument("--version", default="latest")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_fetch)

    p = sub.add_parser("runs", help="list a flow's runs")
    p.add_argument("flow")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_runs)

    p = sub.add_parser("provenance", help="show how a version was produced")
    p.add_argument("asset")
    p.add_argument("version", type=int)
    p.add_argument("--depth", type=int, default=None)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_provenance)

    p = sub.add_parser("token", help="issue a bearer token (admin)")
    tsub = p.add_subparsers(dest="token_command", required=True)
    t = tsub.add_parser("create")
    t.add_argument("--name", required=True)
    t.add_argument("--admin", action="store_true")
    t.set_defaults(func=cmd_token)

    p = sub.add_parser("serve", help="run the service in the foreground")
    p.add_argument("--config", default=None, help="TOML config path")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("bench", help="run the synthetic concurrency benchmark")
    p.add_argument("--concurrency", default="1,5,10,20",
                   help="comma-separated concurrency levels (default 1,5,10,20)")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--size", type=int, default=61_680_000)
    p.add_argument("--slots", type=int, default=32)
    p.add_argument("--seed", type=int, default=1137)
    p.add_argument("--out", default=None, help="write JSON report here (plus .dat table)")
    p.add_argument("--remote", action="store_true",
                   help="benchmark the --server deployment instead of an embedded service")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("openapi", help="generate the OpenAPI description")
    p.add_argument("--out", default="docs/openapi.json")
    p.set_defaults(func=cmd_openapi)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ApiError as exc:
        print(f"error: {exc.message}", file=sys.stderr)
        return 1
    except AeroError as exc:
        print(f"error: {exc.message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
