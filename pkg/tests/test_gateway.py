"""Route table semantics and live proxy behavior against stub backends."""

from __future__ import annotations

import threading
import time
from collections import Counter
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import httpx
import pytest

from podbay.gateway import (DuplicateRoute, Gateway, ProxyError, RouteEntry,
                            RouteNotFound, RouteTable, external_path)


class StubBackend:
    """Minimal pod-like backend recording which requests it served."""

    def __init__(self, response: bytes = b"9", status: int = 200,
                 delay: float = 0.0):
        self.served = 0
        self._lock = threading.Lock()
        backend = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, fmt, *args):
                pass

            def _respond(self):
                if delay:
                    time.sleep(delay)
                with backend._lock:
                    backend.served += 1
                self.send_response(status)
                self.send_header("Content-Type", "text/plain; charset=utf-8")
                self.send_header("Content-Length", str(len(response)))
                self.end_headers()
                self.wfile.write(response)

            def do_GET(self):
                self._respond()

            def do_POST(self):
                length = int(self.headers.get("Content-Length") or 0)
                self.body = self.rfile.read(length)
                self._respond()

        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.httpd.daemon_threads = True
        threading.Thread(target=self.httpd.serve_forever, daemon=True).start()

    @property
    def endpoint(self) -> str:
        return f"127.0.0.1:{self.httpd.server_address[1]}"

    def stop(self):
        self.httpd.shutdown()
        self.httpd.server_close()


@pytest.fixture
def gateway():
    gw = Gateway(port=0, request_timeout=5.0)
    gw.start()
    yield gw
    gw.stop()


PATH = external_path("user-alice", "test", "v1", "add_two_ints")


class TestRouteTable:
    def test_register_and_resolve(self):
        table = RouteTable()
        table.register(RouteEntry(PATH, "POST", "d1", backends=["127.0.0.1:1"]))
        entry, backend = table.resolve(PATH, "POST")
        assert backend == "127.0.0.1:1"
        assert entry.backend_route == "add_two_ints"

    def test_duplicate_route(self):
        table = RouteTable()
        table.register(RouteEntry(PATH, "POST", "d1"))
        with pytest.raises(DuplicateRoute):
            table.register(RouteEntry(PATH, "POST", "d1"))

    def test_unknown_path_404(self):
        with pytest.raises(ProxyError) as exc:
            RouteTable().resolve("/svc/x/y/z/f", "GET")
        assert exc.value.http_status == 404

    def test_method_mismatch_405(self):
        table = RouteTable()
        table.register(RouteEntry(PATH, "POST", "d1", backends=["127.0.0.1:1"]))
        with pytest.raises(ProxyError) as exc:
            table.resolve(PATH, "GET")
        assert exc.value.http_status == 405

    def test_empty_backends_503(self):
        table = RouteTable()
        table.register(RouteEntry(PATH, "POST", "d1"))
        with pytest.raises(ProxyError) as exc:
            table.resolve(PATH, "POST")
        assert exc.value.http_status == 503

    def test_all_unhealthy_503(self):
        table = RouteTable()
        table.register(RouteEntry(PATH, "POST", "d1", backends=["a:1", "b:2"]))
        table.mark_unhealthy("a:1")
        table.mark_unhealthy("b:2")
        with pytest.raises(ProxyError) as exc:
            table.resolve(PATH, "POST")
        assert exc.value.http_status == 503

    def test_round_robin_exact_fairness(self):
        table = RouteTable()
        table.register(RouteEntry(PATH, "POST", "d1",
                                  backends=["a:1", "b:2", "c:3"]))
        picks = Counter(table.resolve(PATH, "POST")[1] for _ in range(6))
        assert picks == {"a:1": 2, "b:2": 2, "c:3": 2}

    def test_round_robin_bounds_property(self):
        # for R requests over B backends each backend gets floor(R/B)..ceil(R/B)
        table = RouteTable()
        backends = [f"b:{i}" for i in range(7)]
        table.register(RouteEntry(PATH, "POST", "d1", backends=list(backends)))
        r = 100
        picks = Counter(table.resolve(PATH, "POST")[1] for _ in range(r))
        for b in backends:
            assert r // 7 <= picks[b] <= -(-r // 7)

    def test_unregister(self):
        table = RouteTable()
        table.register(RouteEntry(PATH, "POST", "d1", backends=["a:1"]))
        table.unregister(PATH)
        with pytest.raises(ProxyError) as exc:
            table.resolve(PATH, "POST")
        assert exc.value.http_status == 404
        with pytest.raises(RouteNotFound):
            table.unregister(PATH)

    def test_remove_backend_never_selected_again(self):
        table = RouteTable()
        table.register(RouteEntry(PATH, "POST", "d1", backends=["a:1", "b:2"]))
        table.remove_backend("d1", "a:1")
        for _ in range(10):
            assert table.resolve(PATH, "POST")[1] == "b:2"

    def test_concurrent_mutation_and_resolution(self):
        table = RouteTable()
        table.register(RouteEntry(PATH, "POST", "d1", backends=["a:1", "b:2"]))
        stop = threading.Event()
        errors = []

        def resolver():
            while not stop.is_set():
                try:
                    table.resolve(PATH, "POST")
                except ProxyError as e:
                    if e.http_status != 503:
                        errors.append(e)
                except Exception as e:  # table corruption would surface here
                    errors.append(e)

        def mutator():
            for i in range(300):
                table.set_backends("d1", [f"x:{i}", f"y:{i}"])
                table.remove_backend("d1", f"x:{i}")

        threads = [threading.Thread(target=resolver) for _ in range(4)]
        for t in threads:
            t.start()
        mutator()
        stop.set()
        for t in threads:
            t.join()
        assert errors == []


class TestProxy:
    def test_forward_post(self, gateway):
        backend = StubBackend(response=b"9")
        try:
            gateway.register_route(RouteEntry(PATH, "POST", "d1",
                                              backends=[backend.endpoint]))
            r = httpx.post(gateway.base_url + PATH, data={"a": "4", "b": "5"})
            assert r.status_code == 200
            assert r.text == "9"
        finally:
            backend.stop()

    def test_unknown_route_404_body(self, gateway):
        r = httpx.post(gateway.base_url + "/svc/no/pe/v9/f")
        assert r.status_code == 404
        assert r.json()["code"] == "UNKNOWN_ROUTE"

    def test_empty_backends_503(self, gateway):
        gateway.register_route(RouteEntry(PATH, "POST", "d1"))
        assert httpx.post(gateway.base_url + PATH).status_code == 503

    def test_failover_to_second_backend(self, gateway):
        dead = StubBackend()
        alive = StubBackend(response=b"ok")
        dead.stop()  # port now refuses connections
        gateway.register_route(RouteEntry(PATH, "POST", "d1",
                                          backends=[dead.endpoint, alive.endpoint]))
        try:
            for _ in range(4):  # every rotation position must succeed via retry
                r = httpx.post(gateway.base_url + PATH, data={"a": "1"})
                assert r.status_code == 200
                assert r.text == "ok"
        finally:
            alive.stop()

    def test_both_backends_dead_502(self, gateway):
        d1, d2 = StubBackend(), StubBackend()
        d1.stop()
        d2.stop()
        gateway.register_route(RouteEntry(PATH, "POST", "d1",
                                          backends=[d1.endpoint, d2.endpoint]))
        r = httpx.post(gateway.base_url + PATH, data={"a": "1"})
        assert r.status_code == 502

    def test_backend_timeout_504(self):
        gw = Gateway(port=0, request_timeout=0.3)
        gw.start()
        slow = StubBackend(delay=2.0)
        try:
            gw.register_route(RouteEntry(PATH, "POST", "d1",
                                         backends=[slow.endpoint]))
            r = httpx.post(gw.base_url + PATH, data={"a": "1"}, timeout=10.0)
            assert r.status_code == 504
        finally:
            slow.stop()
            gw.stop()

    def test_file_response_gets_attachment(self, gateway):
        backend = StubBackend(response=b"\x01\x02")
        path = external_path("user-alice", "test", "v1", "sendmyfile")
        try:
            gateway.register_route(RouteEntry(path, "POST", "d1",
                                              backends=[backend.endpoint],
                                              returns="file"))
            r = httpx.post(gateway.base_url + path, data={"a": "1"})
            assert "attachment" in r.headers.get("content-disposition", "")
        finally:
            backend.stop()

    def test_unregister_in_flight_completes(self, gateway):
        slow = StubBackend(response=b"done", delay=0.5)
        try:
            gateway.register_route(RouteEntry(PATH, "POST", "d1",
                                              backends=[slow.endpoint]))
            result = {}

            def call():
                result["resp"] = httpx.post(gateway.base_url + PATH,
                                            data={"a": "1"}, timeout=10.0)

            t = threading.Thread(target=call)
            t.start()
            time.sleep(0.15)  # request now in flight
            gateway.unregister_route(PATH)
            assert httpx.post(gateway.base_url + PATH).status_code == 404
            t.join(timeout=10)
            assert result["resp"].status_code == 200
            assert result["resp"].text == "done"
        finally:
            slow.stop()

    def test_early_ack_interim_response(self, gateway):
        import socket as socketlib
        backend = StubBackend(response=b"9", delay=0.2)
        try:
            gateway.register_route(RouteEntry(PATH, "POST", "d1",
                                              backends=[backend.endpoint]))
            body = b"a=4&b=5"
            req = (f"POST {PATH} HTTP/1.1\r\nHost: x\r\nX-Early-Ack: 1\r\n"
                   f"Content-Type: application/x-www-form-urlencoded\r\n"
                   f"Content-Length: {len(body)}\r\nConnection: close\r\n\r\n"
                   ).encode() + body
            with socketlib.create_connection(("127.0.0.1", gateway.port)) as s:
                s.sendall(req)
                t0 = time.time()
                first = s.recv(64)
                t_first = time.time()
                rest = b""
                while True:
                    chunk = s.recv(4096)
                    if not chunk:
                        break
                    rest += chunk
                t_done = time.time()
            assert first.startswith(b"HTTP/1.1 102")
            assert b"HTTP/1.1 200" in rest and rest.endswith(b"9")
            # the interim line arrived before the backend finished
            assert t_first - t0 < 0.15
            assert t_done - t0 >= 0.2
        finally:
            backend.stop()

    def test_balance_through_live_proxy(self, gateway):
        backends = [StubBackend(response=b"x") for _ in range(3)]
        try:
            gateway.register_route(RouteEntry(
                PATH, "POST", "d1", backends=[b.endpoint for b in backends]))
            with httpx.Client() as client:
                for _ in range(30):
                    assert client.post(gateway.base_url + PATH,
                                       data={"a": "1"}).status_code == 200
            assert [b.served for b in backends] == [10, 10, 10]
        finally:
            for b in backends:
                b.stop()
