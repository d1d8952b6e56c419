"""HTTP client for the /v1 API.

Metadata calls go to the gateway; ``fetch`` then downloads object bytes
directly from the collection server named in the metadata's download_url,
never through the gateway. Both HTTP clients are injectable so harnesses
can account for every connection.
"""

from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Any

import httpx

from .errors import AeroError, ServerUnreachable


class ApiError(AeroError):
    """Server-reported error with its HTTP status and code."""

    def __init__(self, status_code: int, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.http_status = status_code
        self.code = code


class AeroClient:
    def __init__(
        self,
        base_url: str,
        token: str | None = None,
        http: httpx.Client | None = None,
        download_http: httpx.Client | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.token = token
        self._http = http or httpx.Client(timeout=30.0)
        self._download = download_http or httpx.Client(timeout=60.0)

    def close(self) -> None:
        self._http.close()
        self._download.close()

    def __enter__(self) -> "AeroClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- raw request layer -------------------------------------------------------

    def request(self, method: str, path: str, **kwargs) -> Any:
        headers = kwargs.pop("headers", {})
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        try:
            response = self._http.request(method, self.base_url + path, headers=headers, **kwargs)
        except httpx.TransportError as exc:
            raise ServerUnreachable(f"{self.base_url}: {exc}") from exc
        if response.status_code >= 400:
            try:
                body = response.json()
                raise ApiError(response.status_code, body.get("code", "Error"), body.get("message", ""))
            except ValueError:
                raise ApiError(response.status_code, "Error", response.text)
        if response.status_code == 204 or not response.content:
            return None
        return response.json()

    # -- typed wrappers -------------------------------------------------------------

    def healthz(self) -> dict:
        return self.request("GET", "/healthz")

    def create_token(self, display_name: str, admin: bool = False) -> dict:
        return self.request("POST", "/v1/tokens", json={"display_name": display_name, "admin": admin})

    def create_collection(self) -> dict:
        return self.request("POST", "/v1/collections")

    def update_acl(self, resource_type: str, resource_id: str, principal_id: str,
                   perms: list[str], mode: str = "grant") -> dict:
        return self.request("POST", "/v1/acl", json={
            "resource_type": resource_type,
            "resource_id": resource_id,
            "principal_id": principal_id,
            "perms": perms,
            "mode": mode,
        })

    def create_asset(self, name: str, collection_ref: str, description: str = "",
                     tags: list[str] | None = None, source_url: str | None = None) -> str:
        body = {
            "name": name,
            "description": description,
            "tags": tags or [],
            "collection_ref": collection_ref,
            "source_url": source_url,
        }
        return self.request("POST", "/v1/assets", json=body)["asset_id"]

    def get_asset(self, asset_id: str) -> dict:
        return self.request("GET", f"/v1/assets/{asset_id}")

    def get_version(self, asset_id: str, selector: str = "latest") -> dict:
        return self.request("GET", f"/v1/assets/{asset_id}/versions/{selector}")

    def register_function(self, entry: str, description: str = "") -> str:
        return self.request("POST", "/v1/functions", json={"entry": entry, "description": description})["function_id"]

    def register_endpoint(self, kind: str = "local_subprocess", slots: int = 1,
                          allowed_functions: list[str] | None = None) -> str:
        body = {"kind": kind, "slots": slots, "allowed_functions": allowed_functions}
        return self.request("POST", "/v1/endpoints", json=body)["endpoint_id"]

    def register_flow(self, spec: dict) -> dict:
        return self.request("POST", "/v1/flows", json=spec)

    def get_flow(self, flow_id: str) -> dict:
        return self.request("GET", f"/v1/flows/{flow_id}")

    def delete_flow(self, flow_id: str) -> None:
        self.request("DELETE", f"/v1/flows/{flow_id}")

    def dispatch_flow(self, flow_id: str) -> bool:
        return self.request("POST", f"/v1/flows/{flow_id}/dispatch")["accepted"]

    def list_runs(self, flow_id: str) -> list[dict]:
        return self.request("GET", f"/v1/flows/{flow_id}/runs")

    def search(self, q: str = "", tags: list[str] | None = None, asset_id: str | None = None,
               limit: int = 50, offset: int = 0) -> list[dict]:
        params: list[tuple[str, str]] = [("q", q), ("limit", str(limit)), ("offset", str(offset))]
        for tag in tags or []:
            params.append(("tag", tag))
        if asset_id:
            params.append(("asset_id", asset_id))
        return self.request("GET", "/v1/search", params=params)

    def provenance(self, asset_id: str, version: int, depth: int | None = None) -> dict:
        params = {"depth": depth} if depth is not None else None
        return self.request("GET", f"/v1/provenance/{asset_id}/{version}", params=params)

    # -- direct download ---------------------------------------------------------------

    def fetch(self, asset_id: str, out_path: str | Path, selector: str = "latest") -> dict:
        """Download a version's bytes to ``out_path`` straight from the
        collection server, verifying size and checksum against the metadata."""
        meta = self.get_version(asset_id, selector)
        digest = hashlib.sha256()
        size = 0
        headers = {}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        try:
            with self._download.stream("GET", meta["download_url"], headers=headers) as response:
                if response.status_code >= 400:
                    raise ApiError(response.status_code, "DownloadFailed", response.read().decode("utf-8", "replace"))
                with open(out_path, "wb") as f:
                    for chunk in response.iter_bytes(1 << 20):
                        digest.update(chunk)
                        size += len(chunk)
                        f.write(chunk)
        except httpx.TransportError as exc:
            raise ServerUnreachable(f"collection server: {exc}") from exc
        if size != meta["size_bytes"] or digest.hexdigest() != meta["checksum"]:
            raise ApiError(502, "ChecksumMismatch",
                           f"downloaded {size} bytes, checksum {digest.hexdigest()[:12]}…; metadata disagrees")
        return meta
