"""In-process mock denoise server for protocol tests.

Serves the wire protocol on localhost with deterministic transforms:
mode "echo" returns the noised video unchanged, mode "zero" returns zeros.
"""

from __future__ import annotations

import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from . import protocol
from .errors import ProtocolError, ShapeMismatch


def _make_handler(mode: str):
    class Handler(BaseHTTPRequestHandler):
        def log_message(self, fmt, *args):
            pass

        def do_POST(self):
            if self.path != "/v1/denoise":
                self.send_error(404)
                return
            length = int(self.headers.get("Content-Length", 0))
            if length > protocol.MAX_PAYLOAD:
                self._fail(400, "payload exceeds 256 MB")
                return
            blob = self.rfile.read(length)
            try:
                video, _, _, _ = protocol.decode_request(blob)
            except ShapeMismatch as exc:
                self._fail(422, str(exc))
                return
            except ProtocolError as exc:
                self._fail(400, str(exc))
                return
            noise = video if mode == "echo" else np.zeros_like(video)
            body = protocol.encode_response(noise)
            self.send_response(200)
            self.send_header("Content-Type", "application/octet-stream")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _fail(self, code: int, msg: str):
            body = msg.encode("utf-8")
            self.send_response(code)
            self.send_header("Content-Type", "text/plain")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

    return Handler


class MockDenoiseServer:
    """Context manager running the mock on an ephemeral localhost port."""

    def __init__(self, mode: str = "echo", port: int = 0):
        if mode not in ("echo", "zero"):
            raise ValueError(f"unknown mock mode {mode!r}")
        self.mode = mode
        self._server = ThreadingHTTPServer(("127.0.0.1", port), _make_handler(mode))
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    @property
    def endpoint(self) -> str:
        host, port = self._server.server_address
        return f"http://{host}:{port}"

    def __enter__(self):
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._server.shutdown()
        self._server.server_close()
        self._thread.join(timeout=5)
        return False
