"""HTTP front for collections.

Runs on its own listener, distinct from the API gateway, so object bytes
structurally never transit the API server: clients are handed a
download_url pointing here and connect directly.

Routes:
    GET  /collections/{cid}/objects/{key}   bearer auth; 200 stream
    HEAD /collections/{cid}/objects/{key}   size + X-Object-Sha256 headers

Single-range ``Range: bytes=a-b`` requests are honored with 206 so large
downloads can resume.
"""

from __future__ import annotations

import logging
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .auth import AuthStore
from .collection_store import CollectionStore, hash_file
from .db import Database
from .errors import Forbidden, Unauthenticated, UnknownCollection, UnknownKey

log = logging.getLogger(__name__)

_OBJECT_PATH = re.compile(r"^/collections/([0-9a-f-]+)/objects/([0-9a-f-]+)$")
_RANGE = re.compile(r"^bytes=(\d*)-(\d*)$")


class CollectionServer:
    def __init__(self, store: CollectionStore, auth: AuthStore, db: Database,
                 host: str = "127.0.0.1", port: int = 0):
        self.store = store
        self.auth = auth
        self.db = db
        outer = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"
            server_version = "aero-collection"

            def do_GET(self):
                outer._handle(self, send_body=True)

            def do_HEAD(self):
                outer._handle(self, send_body=False)

            def log_message(self, fmt, *args):
                log.debug("collection-server: " + fmt, *args)

        class Server(ThreadingHTTPServer):
            daemon_threads = True

            def verify_request(inner, request, client_address):
                outer.connections_total += 1
                return True

        self.connections_total = 0
        self.requests_total = 0
        self.bytes_served = 0
        self._httpd = Server((host, port), Handler)
        self.host, self.port = self._httpd.server_address[:2]
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True,
                                        name="collection-server")
        self._started = False

    @property
    def base_url(self) -> str:
        return f"http://{self.host}:{self.port}"

    def download_url(self, collection_id: str, storage_key: str) -> str:
        return f"{self.base_url}/collections/{collection_id}/objects/{storage_key}"

    def start(self) -> None:
        self._started = True
        self._thread.start()

    def stop(self) -> None:
        # shutdown() blocks on the serve_forever loop; skip it if never started
        if self._started:
            self._httpd.shutdown()
        self._httpd.server_close()

    # -- request handling -----------------------------------------------------

    def _handle(self, request: BaseHTTPRequestHandler, send_body: bool) -> None:
        self.requests_total += 1
        match = _OBJECT_PATH.match(request.path)
        if not match:
            self._error(request, 404, "no such route", send_body)
            return
        collection_id, storage_key = match.groups()
        try:
            principal = self._principal(request)
            self.store.check(collection_id, principal, "read")
            path = self.store.object_path(collection_id, storage_key)
        except Unauthenticated as exc:
            request.send_response(401)
            request.send_header("WWW-Authenticate", 'Bearer realm="collections"')
            body = f'{{"code": "unauthenticated", "message": "{exc.message}"}}'.encode()
            request.send_header("Content-Type", "application/json")
            request.send_header("Content-Length", str(len(body)))
            request.end_headers()
            if send_body:
                request.wfile.write(body)
            return
        except Forbidden:
            self._error(request, 403, "forbidden", send_body)
            return
        except (UnknownKey, UnknownCollection):
            self._error(request, 404, "unknown object", send_body)
            return

        size = path.stat().st_size
        start, end = 0, size - 1
        status = 200
        range_header = request.headers.get("Range")
        if range_header:
            parsed = self._parse_range(range_header, size)
            if parsed is None:
                self._error(request, 416, "unsatisfiable range", send_body)
                return
            start, end = parsed
            status = 206

        request.send_response(status)
        request.send_header("Content-Type", "application/octet-stream")
        request.send_header("Content-Length", str(end - start + 1))
        request.send_header("Accept-Ranges", "bytes")
        request.send_header("X-Object-Sha256", self._checksum_of(storage_key, path))
        if status == 206:
            request.send_header("Content-Range", f"bytes {start}-{end}/{size}")
        request.end_headers()
        if not send_body:
            return
        with open(path, "rb") as f:
            f.seek(start)
            remaining = end - start + 1
            while remaining > 0:
                chunk = f.read(min(1 << 20, remaining))
                if not chunk:
                    break
                request.wfile.write(chunk)
                self.bytes_served += len(chunk)
                remaining -= len(chunk)

    def _principal(self, request: BaseHTTPRequestHandler) -> str:
        header = request.headers.get("Authorization", "")
        if not header.startswith("Bearer "):
            raise Unauthenticated("missing bearer token")
        return self.auth.authenticate(header[len("Bearer "):].strip()).principal_id

    def _checksum_of(self, storage_key: str, path) -> str:
        row = self.db.query_one(
            "SELECT checksum FROM versions WHERE storage_key = ?", (storage_key,)
        )
        if row is not None:
            return row["checksum"]
        digest, _ = hash_file(path)
        return digest

    @staticmethod
    def _parse_range(header: str, size: int) -> tuple[int, int] | None:
        match = _RANGE.match(header.strip())
        if not match or size == 0:
            return None
        raw_start, raw_end = match.groups()
        if raw_start == "" and raw_end == "":
            return None
        if raw_start == "":
            # suffix form: last N bytes
            length = int(raw_end)
            if length == 0:
                return None
            return max(size - length, 0), size - 1
        start = int(raw_start)
        end = int(raw_end) if raw_end else size - 1
        if start >= size or end < start:
            return None
        return start, min(end, size - 1)

    @staticmethod
    def _error(request: BaseHTTPRequestHandler, status: int, message: str, send_body: bool = True) -> None:
        body = f'{{"code": {status}, "message": "{message}"}}'.encode()
        request.send_response(status)
        request.send_header("Content-Type", "application/json")
        request.send_header("Content-Length", str(len(body)))
        request.end_headers()
        if not send_body:
            return
        try:
            request.wfile.write(body)
        except (BrokenPipeError, ConnectionResetError):
            pass
