"""Reverse proxy: dynamic route table, round-robin balancing, failover.

External URLs follow ``/svc/{namespace}/{package}/{version}/{function}``
and map onto the function routes of the deployment's pod servers. The
route table is mutated live (register/unregister/backend swaps) without
disturbing concurrent traffic; the round-robin cursor advances under the
table lock so balancing over a static backend set is exact.

A client may request an interim acknowledgment by sending the
``X-Early-Ack: 1`` header: the gateway then emits an informational
``HTTP/1.1 102`` line as soon as the request is admitted, before the
backend responds. Load-test clients use this to timestamp admission
separately from completion; ordinary clients ignore informational
responses per HTTP/1.1.
"""

from __future__ import annotations

import http.client
import json
import socket
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

EARLY_ACK_HEADER = "X-Early-Ack"

# hop-by-hop headers never relayed between client and backend
_HOP_HEADERS = {"connection", "keep-alive", "proxy-authenticate",
                "proxy-authorization", "te", "trailer", "transfer-encoding",
                "upgrade", "host", "content-length"}


class GatewayError(Exception):
    pass


class DuplicateRoute(GatewayError):
    pass


class RouteNotFound(GatewayError):
    pass


@dataclass
class ProxyError(Exception):
    http_status: int   # 404 | 405 | 422 | 502 | 503 | 504
    code: str
    message: str

    def body(self) -> bytes:
        return json.dumps({"code": self.code, "message": self.message}).encode()


@dataclass
class RouteEntry:
    external_path: str            # /svc/{ns}/{pkg}/{ver}/{fn}
    http_method: str
    deployment_id: str
    backends: list[str] = field(default_factory=list)   # "host:port", READY only
    rr_cursor: int = 0
    returns: str = "string"       # "string" | "file"
    backend_route: str = ""       # path segment on the pod server

    def __post_init__(self):
        if not self.backend_route:
            self.backend_route = self.external_path.rstrip("/").rsplit("/", 1)[-1]


def external_path(namespace: str, package: str, version: str, function: str) -> str:
    return f"/svc/{namespace}/{package}/{version}/{function}"


class RouteTable:
    """Thread-safe route registry with exact round-robin selection."""

    def __init__(self):
        self._lock = threading.Lock()
        self._routes: dict[str, RouteEntry] = {}
        self._inflight: dict[str, int] = {}     # backend endpoint -> count
        self._unhealthy: set[str] = set()

    def register(self, entry: RouteEntry) -> None:
        with self._lock:
            if entry.external_path in self._routes:
                raise DuplicateRoute(entry.external_path)
            self._routes[entry.external_path] = entry

    def unregister(self, path: str) -> None:
        with self._lock:
            if path not in self._routes:
                raise RouteNotFound(path)
            del self._routes[path]

    def set_backends(self, deployment_id: str, backends: list[str]) -> None:
        """Atomically replace the backend set of every route of a deployment."""
        with self._lock:
            for entry in self._routes.values():
                if entry.deployment_id == deployment_id:
                    entry.backends = list(backends)
                    entry.rr_cursor = 0

    def remove_backend(self, deployment_id: str, backend: str) -> None:
        """Drop one endpoint (drain/crash) without resetting rotation."""
        with self._lock:
            for entry in self._routes.values():
                if entry.deployment_id == deployment_id and backend in entry.backends:
                    entry.backends.remove(backend)
                    if entry.backends:
                        entry.rr_cursor %= len(entry.backends)
                    else:
                        entry.rr_cursor = 0

    def mark_unhealthy(self, backend: str, unhealthy: bool = True) -> None:
        with self._lock:
            if unhealthy:
                self._unhealthy.add(backend)
            else:
                self._unhealthy.discard(backend)

    def routes(self) -> list[RouteEntry]:
        with self._lock:
            return list(self._routes.values())

    def lookup(self, path: str) -> RouteEntry | None:
        with self._lock:
            return self._routes.get(path)

    def resolve(self, path: str, method: str, skip: set[str] | None = None) -> tuple[RouteEntry, str]:
        """Pick the next backend by round-robin; raises ProxyError 404/405/503."""
        with self._lock:
            entry = self._routes.get(path)
            if entry is None:
                raise ProxyError(404, "UNKNOWN_ROUTE", f"no route at {path}")
            if entry.http_method != method:
                raise ProxyError(405, "METHOD_NOT_ALLOWED",
                                 f"{path} expects {entry.http_method}")
            candidates = [b for b in entry.backends if b not in self._unhealthy
                          and (skip is None or b not in skip)]
            if not candidates:
                raise ProxyError(503, "NO_HEALTHY_BACKEND",
                                 f"no healthy backend for {path}")
            backend = candidates[entry.rr_cursor % len(candidates)]
            entry.rr_cursor = (entry.rr_cursor + 1) % max(1, len(candidates))
            return entry, backend

    def begin_request(self, backend: str) -> None:
        with self._lock:
            self._inflight[backend] = self._inflight.get(backend, 0) + 1

    def end_request(self, backend: str) -> None:
        with self._lock:
            self._inflight[backend] = max(0, self._inflight.get(backend, 0) - 1)

    def inflight(self, backend: str) -> int:
        with self._lock:
            return self._inflight.get(backend, 0)


class _ProxyHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    table: RouteTable       # set on the bound subclass
    timeout_s: float = 30.0

    def log_message(self, fmt, *args):
        pass

    def do_GET(self):
        self._proxy("GET")

    def do_POST(self):
        self._proxy("POST")

    def _send_proxy_error(self, err: ProxyError) -> None:
        body = err.body()
        self.send_response(err.http_status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _proxy(self, method: str) -> None:
        path, _, query = self.path.partition("?")
        length = int(self.headers.get("Content-Length") or 0)
        body = self.rfile.read(length) if length else b""

        try:
            entry, backend = self.table.resolve(path, method)
        except ProxyError as err:
            self._send_proxy_error(err)
            return

        if self.headers.get(EARLY_ACK_HEADER):
            # interim response: first byte to the client marks admission
            self.wfile.write(b"HTTP/1.1 102 Processing\r\n\r\n")
            self.wfile.flush()

        attempt = 0
        skip: set[str] = set()
        while True:
            attempt += 1
            try:
                self._forward(entry, backend, method, query, body)
                return
            except ProxyError as err:
                if err.http_status == 502 and attempt == 1:
                    # connection-level failure before any response bytes:
                    # one retry on the next backend
                    skip.add(backend)
                    try:
                        entry, backend = self.table.resolve(path, method, skip=skip)
                        continue
                    except ProxyError:
                        pass
                self._send_proxy_error(err)
                return

    def _forward(self, entry: RouteEntry, backend: str, method: str,
                 query: str, body: bytes) -> None:
        host, port = backend.rsplit(":", 1)
        target = "/" + entry.backend_route + (f"?{query}" if query else "")
        self.table.begin_request(backend)
        conn = http.client.HTTPConnection(host, int(port), timeout=self.timeout_s)
        got_response = False
        try:
            try:
                conn.putrequest(method, target, skip_host=False,
                                skip_accept_encoding=True)
                for name, value in self.headers.items():
                    if name.lower() not in _HOP_HEADERS and name != EARLY_ACK_HEADER:
                        conn.putheader(name, value)
                conn.putheader("Content-Length", str(len(body)))
                conn.endheaders(body if body else None)
                resp = conn.getresponse()
                got_response = True
                payload = resp.read()
            except socket.timeout:
                raise ProxyError(504, "BACKEND_TIMEOUT",
                                 f"backend {backend} timed out") from None
            except (ConnectionError, OSError) as e:
                if got_response:
                    raise ProxyError(502, "BACKEND_PROTOCOL_ERROR", str(e)) from e
                raise ProxyError(502, "BACKEND_UNAVAILABLE",
                                 f"backend {backend} unavailable: {e}") from e
            except http.client.HTTPException as e:
                raise ProxyError(502, "BACKEND_PROTOCOL_ERROR", str(e)) from e

            self.send_response(resp.status)
            sent = set()
            for name, value in resp.getheaders():
                if name.lower() not in _HOP_HEADERS:
                    self.send_header(name, value)
                    sent.add(name.lower())
            if entry.returns == "file" and resp.status == 200 \
                    and "content-disposition" not in sent:
                self.send_header("Content-Disposition", "attachment")
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)
        finally:
            conn.close()
            self.table.end_request(backend)


class Gateway:
    """The public reverse-proxy server wrapped around a RouteTable."""

    def __init__(self, port: int = 0, host: str = "127.0.0.1",
                 request_timeout: float = 30.0):
        self.table = RouteTable()
        handler = type("BoundProxyHandler", (_ProxyHandler,),
                       {"table": self.table, "timeout_s": request_timeout})
        # The backlog must be a class attribute: listen() runs inside
        # TCPServer.__init__, so assigning it on the instance afterwards
        # would leave the default backlog of 5 in place.
        server_cls = type("GatewayHTTPServer", (ThreadingHTTPServer,),
                          {"daemon_threads": True, "request_queue_size": 1024})
        self._httpd = server_cls((host, port), handler)
        self._thread: threading.Thread | None = None

    @property
    def port(self) -> int:
        return self._httpd.server_address[1]

    @property
    def base_url(self) -> str:
        return f"http://127.0.0.1:{self.port}"

    def start(self) -> None:
        self._thread = threading.Thread(target=self._httpd.serve_forever,
                                        name="gateway", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._httpd.shutdown()
        if self._thread:
            self._thread.join(timeout=5)
        self._httpd.server_close()

    # convenience passthroughs
    def register_route(self, entry: RouteEntry) -> None:
        self.table.register(entry)

    def unregister_route(self, path: str) -> None:
        self.table.unregister(path)
