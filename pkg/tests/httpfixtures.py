"""A scripted local HTTP server for hermetic network tests."""

from __future__ import annotations

import json
import threading
import time
from collections import defaultdict
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer


class ScriptedServer:
    """Routes map a path to a handler ``(method, path, body, hit_no) -> (status, headers, body)``.

    Every request is recorded as ``(monotonic_time, method, path)`` in
    ``self.log``; ``self.hits[path]`` counts requests per path.
    """

    def __init__(self, routes: dict | None = None) -> None:
        self.routes = dict(routes or {})
        self.log: list[tuple[float, str, str]] = []
        self.hits: dict[str, int] = defaultdict(int)
        self.bodies: list[bytes] = []
        self.headers: list[dict[str, str]] = []
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):  # keep test output quiet
                pass

            def _serve(self, method):
                path = self.path
                length = int(self.headers.get("Content-Length") or 0)
                body = self.rfile.read(length) if length else b""
                outer.log.append((time.monotonic(), method, path))
                outer.hits[path] += 1
                outer.bodies.append(body)
                outer.headers.append(dict(self.headers.items()))
                handler = outer.routes.get(path.split("?")[0])
                if handler is None:
                    status, headers, payload = 404, {"Content-Type": "text/plain"}, b"not found"
                else:
                    status, headers, payload = handler(method, path, body, outer.hits[path])
                if isinstance(payload, str):
                    payload = payload.encode("utf-8")
                self.send_response(status)
                for k, v in headers.items():
                    self.send_header(k, v)
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                self.wfile.write(payload)

            def do_GET(self):
                self._serve("GET")

            def do_POST(self):
                self._serve("POST")

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    @property
    def base(self) -> str:
        host, port = self.server.server_address[:2]
        return f"http://{host}:{port}"

    def url(self, path: str) -> str:
        return self.base + path

    def __enter__(self) -> ScriptedServer:
        self.thread.start()
        return self

    def __exit__(self, *exc) -> None:
        self.server.shutdown()
        self.server.server_close()


def static(body, status=200, content_type="text/html; charset=utf-8"):
    return lambda method, path, req, n: (status, {"Content-Type": content_type}, body)


def json_response(obj, status=200):
    return lambda method, path, req, n: (status, {"Content-Type": "application/json"}, json.dumps(obj))
