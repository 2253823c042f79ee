"""HTTP server hosting user handler functions behind a worker pool."""

from __future__ import annotations

import argparse
import importlib.util
import json
import os
import re
import shlex
import signal
import subprocess
import sys
import tempfile
import threading
import time
import urllib.parse
from dataclasses import dataclass
from email.parser import BytesParser
from email.policy import HTTP
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

MAX_QUEUE = 1024          # admission queue beyond the worker pool
_INT_RE = re.compile(r"^[+-]?[0-9]+$")


@dataclass
class Binding:
    http_method: str
    route: str
    handler_file: str
    handler_function: str
    params: list[tuple[str, str]]
    file_params: list[str]
    returns: str


@dataclass
class HostConfig:
    bindings_path: str
    port: int
    workers: int
    workdir: str


class BindingsError(Exception):
    pass


def load_bindings(path: str | Path) -> list[Binding]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise BindingsError(f"cannot read bindings file {path}: {e}") from e
    if not isinstance(doc, list):
        raise BindingsError("bindings file must contain a list")
    bindings = []
    for i, entry in enumerate(doc):
        try:
            bindings.append(Binding(
                http_method=str(entry["http_method"]).upper(),
                route=str(entry["route"]),
                handler_file=str(entry["handler_file"]),
                handler_function=str(entry["handler_function"]),
                params=[(str(n), str(t)) for n, t in entry.get("params", [])],
                file_params=[str(f) for f in entry.get("file_params", [])],
                returns=str(entry["returns"]),
            ))
        except (KeyError, TypeError, ValueError) as e:
            raise BindingsError(f"bad binding entry {i}: {e}") from e
    return bindings


def coerce(name: str, type_name: str, raw: str):
    if type_name == "integer":
        if not _INT_RE.match(raw.strip()):
            raise ValueError(f"parameter {name!r} is not a valid integer: {raw!r}")
        return int(raw)
    if type_name == "float":
        try:
            return float(raw)
        except ValueError:
            raise ValueError(f"parameter {name!r} is not a valid float: {raw!r}") from None
    if type_name == "boolean":
        if raw == "true":
            return True
        if raw == "false":
            return False
        raise ValueError(f"parameter {name!r} is not a valid boolean: {raw!r}")
    return raw


def parse_multipart(body: bytes, content_type: str) -> tuple[dict, dict]:
    """Split a multipart/form-data body into text fields and file parts."""
    parser = BytesParser(policy=HTTP)
    msg = parser.parsebytes(
        b"Content-Type: " + content_type.encode("latin-1") + b"\r\n\r\n" + body)
    fields: dict[str, str] = {}
    files: dict[str, bytes] = {}
    if not msg.is_multipart():
        raise ValueError("body is not multipart")
    for part in msg.iter_parts():
        name = part.get_param("name", header="content-disposition")
        if name is None:
            continue
        payload = part.get_payload(decode=True) or b""
        filename = part.get_filename()
        if filename is not None:
            files[name] = payload
        else:
            fields[name] = payload.decode("utf-8")
    return fields, files


class HandlerRuntime:
    """Imported handler modules plus the worker pool."""

    def __init__(self, config: HostConfig, bindings: list[Binding]):
        self.config = config
        self.bindings = {b.route: b for b in bindings}
        self.workdir = Path(config.workdir)
        self.semaphore = threading.Semaphore(config.workers)
        self.waiting = 0
        self.in_flight = 0
        self.served = 0
        self.lock = threading.Lock()
        self.functions: dict[str, object] = {}
        site = self.workdir / "site-packages"
        if site.is_dir():
            sys.path.insert(0, str(site))
        self._load_handlers()

    def _load_handlers(self) -> None:
        for b in self.bindings.values():
            key = b.handler_file
            path = self.workdir / "functions" / b.handler_file
            if not path.is_file():
                raise BindingsError(f"handler file missing: {path}")
            module_name = "handlers_" + re.sub(r"\W", "_", key)
            spec = importlib.util.spec_from_file_location(module_name, path)
            module = importlib.util.module_from_spec(spec)
            spec.loader.exec_module(module)
            fn = getattr(module, b.handler_function, None)
            if not callable(fn):
                raise BindingsError(
                    f"function {b.handler_function!r} not found in {b.handler_file}")
            self.functions[b.route] = fn

    def dispatch(self, binding: Binding, fields: dict[str, str],
                 file_parts: dict[str, bytes]):
        """Coerce arguments and invoke the handler; returns (kind, payload).

        Positional calling convention: file parts first, then params, each
        in declaration order (handler parameter names need not match the
        manifest's).
        """
        declared = {n for n, _ in binding.params}
        for key in fields:
            if key not in declared:
                raise ValueError(f"unexpected parameter {key!r}")
        for fp in binding.file_params:
            if fp not in file_parts:
                raise ValueError(f"missing file part {fp!r}")
        for key in file_parts:
            if key not in binding.file_params:
                raise ValueError(f"unexpected file part {key!r}")

        args = []
        tmp_paths = []
        try:
            for fp in binding.file_params:
                tmp = tempfile.NamedTemporaryFile(prefix=f"{fp}_", delete=False)
                tmp.write(file_parts[fp])
                tmp.close()
                tmp_paths.append(tmp.name)
                args.append(tmp.name)
            for pname, ptype in binding.params:
                if pname not in fields:
                    raise ValueError(f"missing required parameter {pname!r}")
                args.append(coerce(pname, ptype, fields[pname]))

            result = self.functions[binding.route](*args)
            with self.lock:
                self.served += 1
            if binding.returns == "file":
                path = result if isinstance(result, (str, os.PathLike)) else None
                if path is None or not Path(path).is_file():
                    raise FileNotFoundError(f"handler returned no readable file path: {result!r}")
                data = Path(path).read_bytes()
                return "file", data
            return "string", str(result)
        finally:
            # keep the echoed temp file alive until its bytes are read above
            for p in tmp_paths:
                try:
                    os.unlink(p)
                except OSError:
                    pass


class PodRequestHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    runtime: HandlerRuntime  # set on the server class

    def log_message(self, fmt, *args):  # route access logs to stderr, prefixed
        sys.stderr.write("access: " + (fmt % args) + "\n")

    def _send(self, status: int, body: bytes, content_type: str = "text/plain; charset=utf-8",
              extra_headers: dict | None = None) -> None:
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        for k, v in (extra_headers or {}).items():
            self.send_header(k, v)
        self.end_headers()
        self.wfile.write(body)

    def _send_error_json(self, status: int, code: str, message: str) -> None:
        body = json.dumps({"code": code, "message": message}).encode("utf-8")
        self._send(status, body, "application/json")

    def do_GET(self):
        path = urllib.parse.urlparse(self.path)
        if path.path == "/healthz":
            self._send(200, b"ok")
            return
        if path.path == "/_served":
            with self.runtime.lock:
                n = self.runtime.served
            self._send(200, str(n).encode())
            return
        fields = {k: v[-1] for k, v in urllib.parse.parse_qs(path.query).items()}
        self._handle_function(path.path, "GET", fields, {})

    def do_POST(self):
        path = urllib.parse.urlparse(self.path)
        length = int(self.headers.get("Content-Length") or 0)
        body = self.rfile.read(length) if length else b""
        content_type = self.headers.get("Content-Type", "")
        try:
            if content_type.startswith("multipart/form-data"):
                fields, files = parse_multipart(body, content_type)
            else:
                fields = {k: v[-1] for k, v in
                          urllib.parse.parse_qs(body.decode("utf-8")).items()}
                files = {}
        except (ValueError, UnicodeDecodeError) as e:
            self._send_error_json(422, "BAD_BODY", str(e))
            return
        self._handle_function(path.path, "POST", fields, files)

    def _handle_function(self, path: str, method: str, fields: dict, files: dict):
        route = path.lstrip("/")
        binding = self.runtime.bindings.get(route)
        if binding is None:
            self._send_error_json(404, "UNKNOWN_ROUTE", f"no function at {path}")
            return
        if binding.http_method != method:
            self._send_error_json(405, "METHOD_NOT_ALLOWED",
                                  f"{route} expects {binding.http_method}")
            return

        rt = self.runtime
        with rt.lock:
            if rt.waiting >= MAX_QUEUE:
                self._send_error_json(503, "QUEUE_FULL", "admission queue full")
                return
            rt.waiting += 1
        rt.semaphore.acquire()
        with rt.lock:
            rt.waiting -= 1
            rt.in_flight += 1
        try:
            sys.stderr.write(f"INVOKE {route}\n")
            try:
                kind, payload = rt.dispatch(binding, fields, files)
            except ValueError as e:
                self._send_error_json(422, "BAD_PARAMS", str(e))
                return
            except Exception as e:
                sys.stderr.write(f"handler error in {route}: {e!r}\n")
                self._send_error_json(500, "HANDLER_ERROR", "handler execution failed")
                return
            if kind == "file":
                self._send(200, payload, "application/octet-stream",
                           {"Content-Disposition": f'attachment; filename="{route}.bin"'})
            else:
                self._send(200, payload.encode("utf-8"))
        finally:
            with rt.lock:
                rt.in_flight -= 1
            rt.semaphore.release()


class PodServer:
    """Wires the runtime, the sidecar process, and the HTTP listener."""

    def __init__(self, config: HostConfig):
        self.config = config
        bindings = load_bindings(config.bindings_path)
        self.runtime = HandlerRuntime(config, bindings)
        self.sidecar: subprocess.Popen | None = None
        handler = type("BoundHandler", (PodRequestHandler,), {"runtime": self.runtime})
        # Backlog must be set as a class attribute because listen() runs
        # inside TCPServer.__init__; instance assignment after the fact
        # would leave the default backlog of 5.
        server_cls = type("PodHTTPServer", (ThreadingHTTPServer,),
                          {"daemon_threads": True, "request_queue_size": 1024})
        try:
            self.httpd = server_cls(("127.0.0.1", config.port), handler)
        except OSError as e:
            raise OSError(f"cannot listen on port {config.port}: {e}") from e

    def start_sidecar(self) -> None:
        command = self._sidecar_command()
        if not command:
            return
        try:
            self.sidecar = subprocess.Popen(
                shlex.split(command), cwd=self.config.workdir,
                stdout=sys.stderr, stderr=sys.stderr)
        except OSError as e:
            raise OSError(f"sidecar spawn failed for {command!r}: {e}") from e
        threading.Thread(target=self._watch_sidecar, daemon=True).start()

    def _sidecar_command(self) -> str:
        recipe = Path(self.config.workdir) / "recipe.json"
        if not recipe.is_file():
            return ""
        try:
            return str(json.loads(recipe.read_text(encoding="utf-8"))
                       .get("sidecar_command") or "")
        except json.JSONDecodeError:
            return ""

    def _watch_sidecar(self) -> None:
        code = self.sidecar.wait()
        sys.stderr.write(f"sidecar exited with code {code}; shutting down\n")
        os._exit(3)

    def serve_forever(self) -> None:
        self.start_sidecar()
        sys.stderr.write(
            f"listening on 127.0.0.1:{self.config.port} "
            f"workers={self.config.workers}\n")
        self.httpd.serve_forever()

    def shutdown(self) -> None:
        if self.sidecar and self.sidecar.poll() is None:
            self.sidecar.terminate()
        self.httpd.shutdown()


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="agenthost")
    parser.add_argument("--bindings", required=True)
    parser.add_argument("--port", type=int, required=True)
    parser.add_argument("--workers", type=int, required=True)
    parser.add_argument("--workdir", required=True)
    ns = parser.parse_args(argv)
    if ns.workers < 1:
        print("workers must be >= 1", file=sys.stderr)
        return 2
    config = HostConfig(bindings_path=ns.bindings, port=ns.port,
                        workers=ns.workers, workdir=ns.workdir)
    try:
        server = PodServer(config)
    except (BindingsError, OSError) as e:
        print(str(e), file=sys.stderr)
        return 1

    def _term(signum, frame):
        # runs on the serve_forever thread: never join the server here
        if server.sidecar and server.sidecar.poll() is None:
            server.sidecar.terminate()
        os._exit(0)

    signal.signal(signal.SIGTERM, _term)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.shutdown()
    return 0
