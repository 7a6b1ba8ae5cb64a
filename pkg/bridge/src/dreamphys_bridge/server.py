"""HTTP server answering /v1/denoise.

Modes: mock-echo (returns the noised video), mock-zero (zeros), model
(classifier-free-guided pipeline via ModelBackend). One request at a time;
concurrent requests get HTTP 429.
"""

from __future__ import annotations

import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from . import wire
from .model import ModelBackend, ModelNotLoaded

MODES = ("mock-echo", "mock-zero", "model")


class DenoiseServer:
    def __init__(self, mode: str = "mock-echo", port: int = 0,
                 backend: ModelBackend = None, host: str = "127.0.0.1"):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        self.mode = mode
        self.backend = backend
        self._busy = threading.Lock()
        self._httpd = ThreadingHTTPServer((host, port), self._handler_class())
        self._thread = None

    @property
    def port(self) -> int:
        return self._httpd.server_address[1]

    @property
    def endpoint(self) -> str:
        host, port = self._httpd.server_address
        return f"http://{host}:{port}"

    def _answer(self, req: wire.DenoiseRequest) -> np.ndarray:
        if self.mode == "mock-echo":
            return req.video
        if self.mode == "mock-zero":
            return np.zeros_like(req.video)
        if self.backend is None:
            raise ModelNotLoaded("model mode without a loaded backend")
        return self.backend.denoise(req)

    def _handler_class(self):
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, fmt, *args):
                pass

            def _send(self, code: int, body: bytes,
                      ctype="application/octet-stream"):
                self.send_response(code)
                self.send_header("Content-Type", ctype)
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def do_POST(self):
                if self.path != "/v1/denoise":
                    self._send(404, b"unknown endpoint", "text/plain")
                    return
                length = int(self.headers.get("Content-Length", 0))
                if length > wire.MAX_PAYLOAD:
                    self._send(400, b"payload exceeds 256 MB", "text/plain")
                    return
                if not outer._busy.acquire(blocking=False):
                    self._send(429, b"one request at a time", "text/plain")
                    return
                try:
                    blob = self.rfile.read(length)
                    try:
                        req = wire.parse_request(blob)
                        noise = outer._answer(req)
                    except wire.BadShape as exc:
                        self._send(422, str(exc).encode(), "text/plain")
                        return
                    except wire.BadFrame as exc:
                        self._send(400, str(exc).encode(), "text/plain")
                        return
                    except ModelNotLoaded as exc:
                        self._send(503, str(exc).encode(), "text/plain")
                        return
                    if noise.shape != req.video.shape:
                        self._send(422, b"backend shape mismatch", "text/plain")
                        return
                    self._send(200, wire.build_response(noise))
                finally:
                    outer._busy.release()

        return Handler

    def start(self):
        self._thread = threading.Thread(target=self._httpd.serve_forever,
                                        daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def serve_forever(self):
        try:
            self._httpd.serve_forever()
        finally:
            self._httpd.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
        return False
