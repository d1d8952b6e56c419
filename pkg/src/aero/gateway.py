"""Public HTTP/JSON API.

Every route is versioned under /v1 and returns a uniform error body
``{code, message}`` on failure. Mutating routes require a bearer token;
anonymous access is limited to the health probe and public search entries.
Responses never carry object bytes for monitored data, only download URLs
pointing at the collection server.
"""

from __future__ import annotations

import logging
from typing import Any

from fastapi import Depends, FastAPI, Query, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .auth import Principal
from .errors import AeroError, Forbidden, Unauthenticated
from .model import (
    EndpointKind,
    FlowDispatch,
    FlowKind,
    FlowSpec,
    InputBinding,
    OutputDecl,
    TriggerRule,
    isots,
)
from .search import QueryFilters

log = logging.getLogger(__name__)


class TokenBody(BaseModel):
    display_name: str
    admin: bool = False


class AclBody(BaseModel):
    resource_type: str
    resource_id: str
    principal_id: str
    perms: list[str]
    mode: str = "grant"


class AssetBody(BaseModel):
    name: str
    description: str = ""
    tags: list[str] = Field(default_factory=list)
    collection_ref: str
    source_url: str | None = None


class FunctionBody(BaseModel):
    entry: str
    description: str = ""


class EndpointBody(BaseModel):
    kind: str = "local_subprocess"
    slots: int = 1
    base_url: str | None = None
    allowed_functions: list[str] | None = None


class FlowBody(BaseModel):
    kind: str
    function_ref: str
    endpoint_ref: str
    inputs: dict[str, dict[str, Any]] = Field(default_factory=dict)
    outputs: dict[str, dict[str, Any]]
    kwargs: dict[str, Any] = Field(default_factory=dict)
    rule: dict[str, Any]
    contact: str = ""


def _flow_json(spec: FlowSpec) -> dict[str, Any]:
    return {
        "flow_id": spec.flow_id,
        "kind": spec.kind.value,
        "function_ref": spec.function_ref,
        "endpoint_ref": spec.endpoint_ref,
        "inputs": {p: b.to_json() for p, b in spec.inputs.items()},
        "outputs": {n: d.to_json() for n, d in spec.outputs.items()},
        "kwargs": spec.kwargs,
        "rule": spec.rule.to_json(),
        "contact": spec.contact,
        "owner": spec.owner,
        "dedup_key": spec.dedup_key,
        "created_at": isots(spec.created_at),
    }


def create_app(service) -> FastAPI:
    app = FastAPI(
        title="AERO",
        description="Research data automation service: monitored assets, "
        "trigger-driven flows, provenance, and search.",
        version="1.0",
        redoc_url=None,
    )

    def authenticated(request: Request) -> Principal:
        header = request.headers.get("authorization", "")
        if not header.lower().startswith("bearer "):
            raise Unauthenticated("missing bearer token")
        return service.auth.authenticate(header[7:].strip())

    def maybe_authenticated(request: Request) -> Principal | None:
        header = request.headers.get("authorization", "")
        if not header.lower().startswith("bearer "):
            return None
        return service.auth.authenticate(header[7:].strip())

    @app.exception_handler(AeroError)
    def aero_error_handler(request: Request, exc: AeroError):
        headers = {}
        if exc.http_status == 401:
            headers["WWW-Authenticate"] = 'Bearer realm="aero"'
        code = type(exc).__name__
        return JSONResponse(
            status_code=exc.http_status,
            content={"code": code, "message": exc.message},
            headers=headers,
        )

    @app.exception_handler(ValueError)
    def value_error_handler(request: Request, exc: ValueError):
        return JSONResponse(status_code=400, content={"code": "InvalidRequest", "message": str(exc)})

    @app.exception_handler(RequestValidationError)
    def validation_handler(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"code": "InvalidRequest", "message": str(exc)})

    # -- service ----------------------------------------------------------------

    @app.get("/healthz")
    def healthz():
        return {"ok": True}

    # -- auth admin --------------------------------------------------------------

    @app.post("/v1/tokens", status_code=201)
    def create_token(body: TokenBody, caller: Principal = Depends(authenticated)):
        if not caller.is_admin:
            raise Forbidden("token issuance requires an admin principal")
        principal = service.auth.create_principal(body.display_name, is_admin=body.admin)
        token = service.auth.issue_token(principal.principal_id)
        return {
            "principal_id": principal.principal_id,
            "display_name": principal.display_name,
            "token": token,
        }

    @app.post("/v1/acl", status_code=200)
    def update_acl(body: AclBody, caller: Principal = Depends(authenticated)):
        owner = service.resource_owner(body.resource_type, body.resource_id)
        if not caller.is_admin:
            service.acl.require(
                caller.principal_id, body.resource_type, body.resource_id, "admin", owner=owner
            )
        perms = set(body.perms)
        if body.mode == "grant":
            service.acl.grant(body.resource_type, body.resource_id, body.principal_id, perms)
        elif body.mode == "revoke":
            service.acl.revoke(body.resource_type, body.resource_id, body.principal_id, perms)
        else:
            raise ValueError(f"mode must be grant or revoke, got {body.mode!r}")
        if body.resource_type == "asset":
            service.registry.refresh_search_visibility(body.resource_id)
        return {"ok": True}

    # -- collections ----------------------------------------------------------------

    @app.post("/v1/collections", status_code=201)
    def create_collection(caller: Principal = Depends(authenticated)):
        collection_id = service.store.create_collection(caller.principal_id)
        return {"collection_id": collection_id, "base_url": service.collection_base_url()}

    # -- assets ------------------------------------------------------------------------

    @app.post("/v1/assets", status_code=201)
    def create_asset(body: AssetBody, caller: Principal = Depends(authenticated)):
        asset_id = service.registry.create_asset(
            name=body.name,
            description=body.description,
            tags=set(body.tags),
            collection_ref=body.collection_ref,
            source_url=body.source_url,
            owner=caller.principal_id,
        )
        return {"asset_id": asset_id}

    @app.get("/v1/assets/{asset_id}")
    def get_asset(asset_id: str, caller: Principal = Depends(authenticated)):
        asset = service.registry.require_asset_read(asset_id, caller.principal_id)
        return {
            "asset_id": asset.asset_id,
            "name": asset.name,
            "description": asset.description,
            "tags": sorted(asset.tags),
            "collection_ref": asset.collection_ref,
            "source_url": asset.source_url,
            "owner": asset.owner,
            "created_at": isots(asset.created_at),
            "last_polled_at": isots(asset.last_polled_at) if asset.last_polled_at else None,
            "version_count": service.registry.version_count(asset_id),
        }

    @app.get("/v1/assets/{asset_id}/versions/{selector}")
    def get_version(asset_id: str, selector: str, caller: Principal = Depends(authenticated)):
        version = None if selector == "latest" else _parse_version(selector)
        meta = service.registry.get_metadata(asset_id, version, principal=caller.principal_id)
        return meta.to_json()

    # -- executor resources ----------------------------------------------------------------

    @app.post("/v1/functions", status_code=201)
    def register_function(body: FunctionBody, caller: Principal = Depends(authenticated)):
        ref = service.hub.register_function(body.entry, body.description, caller.principal_id)
        return {"function_id": ref.function_id, "entry": ref.entry}

    @app.post("/v1/endpoints", status_code=201)
    def register_endpoint(body: EndpointBody, caller: Principal = Depends(authenticated)):
        ref = service.hub.register_endpoint(
            kind=EndpointKind(body.kind),
            principal=caller.principal_id,
            slots=body.slots,
            base_url=body.base_url,
            allowed_functions=set(body.allowed_functions) if body.allowed_functions is not None else None,
        )
        return {"endpoint_id": ref.endpoint_id, "kind": ref.kind.value, "slots": ref.slots}

    # -- flows ---------------------------------------------------------------------------------

    @app.post("/v1/flows", status_code=201)
    def register_flow(body: FlowBody, caller: Principal = Depends(authenticated)):
        spec = service.registry.register_flow(
            kind=FlowKind(body.kind),
            function_ref=body.function_ref,
            endpoint_ref=body.endpoint_ref,
            inputs={p: InputBinding.from_json(b) for p, b in body.inputs.items()},
            outputs={n: OutputDecl.from_json(d) for n, d in body.outputs.items()},
            kwargs=body.kwargs,
            rule=TriggerRule.from_json(body.rule),
            contact=body.contact,
            owner=caller.principal_id,
        )
        return _flow_json(spec)

    @app.get("/v1/flows/{flow_id}")
    def get_flow(flow_id: str, caller: Principal = Depends(authenticated)):
        spec = service.registry.get_flow(flow_id)
        if caller.principal_id != spec.owner and not service.acl.allows(
            caller.principal_id, "flow", flow_id, "view_runs", owner=spec.owner
        ):
            raise Forbidden(f"flow {flow_id} is not visible to this principal")
        return _flow_json(spec)

    @app.delete("/v1/flows/{flow_id}")
    def delete_flow(flow_id: str, caller: Principal = Depends(authenticated)):
        service.registry.delete_flow(flow_id, caller.principal_id)
        return {"ok": True}

    @app.post("/v1/flows/{flow_id}/dispatch", status_code=202)
    def dispatch_flow(flow_id: str, caller: Principal = Depends(authenticated)):
        spec = service.registry.get_flow(flow_id)
        if caller.principal_id != spec.owner:
            service.acl.require(caller.principal_id, "flow", flow_id, "execute", owner=spec.owner)
        accepted = service.runner.submit(FlowDispatch(flow_id, "manual"))
        return {"accepted": accepted}

    @app.get("/v1/flows/{flow_id}/runs")
    def list_runs(flow_id: str, caller: Principal = Depends(authenticated)):
        runs = service.registry.list_runs(flow_id, caller.principal_id)
        return [run.to_json() for run in runs]

    # -- search and provenance -----------------------------------------------------------------

    @app.get("/v1/search")
    def search(
        q: str = "",
        tag: list[str] = Query(default=[]),
        asset_id: str | None = None,
        date_from: str | None = Query(default=None, alias="from"),
        date_to: str | None = Query(default=None, alias="to"),
        limit: int = 50,
        offset: int = 0,
        caller: Principal | None = Depends(maybe_authenticated),
    ):
        filters = QueryFilters.parse(tags=tag, asset_id=asset_id, date_from=date_from, date_to=date_to)
        principal = caller.principal_id if caller else None
        hits = service.registry.search_index.query(q, principal, filters, limit=limit, offset=offset)
        return [hit.to_json() for hit in hits]

    @app.get("/v1/provenance/{asset_id}/{version}")
    def provenance(
        asset_id: str,
        version: int,
        depth: int | None = None,
        caller: Principal = Depends(authenticated),
    ):
        service.registry.require_asset_read(asset_id, caller.principal_id)
        tree = service.registry.provenance_of(asset_id, version, depth)
        return tree.to_json()

    return app


def _parse_version(selector: str) -> int:
    try:
        return int(selector)
    except ValueError:
        raise ValueError(f"version selector must be an integer or 'latest', got {selector!r}")
