"""Deterministic mock hidden-states endpoint for tests and smoke runs.

Serves POST /v1/hidden_states with token states derived from a hash of
(prompt, layer), so repeated calls return identical vectors without any model.
"""

from __future__ import annotations

import hashlib
import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np


def mock_hidden_states(prompt: str, layer: int, dim: int) -> np.ndarray:
    tokens = prompt.split() or ["<empty>"]
    out = np.empty((len(tokens), dim), dtype=np.float64)
    for i, tok in enumerate(tokens):
        digest = hashlib.sha256(f"{tok}|{layer}|{dim}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        out[i] = rng.standard_normal(dim)
    return out


class MockHiddenStatesServer:
    """Threaded HTTP server; use as a context manager. Counts requests."""

    def __init__(self, dim: int = 64, port: int = 0):
        self.dim = dim
        self.request_count = 0
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):  # noqa: N802 - http.server API
                if self.path != "/v1/hidden_states":
                    self.send_error(404)
                    return
                length = int(self.headers.get("Content-Length", 0))
                req = json.loads(self.rfile.read(length))
                states = mock_hidden_states(req["prompt"], int(req["layer"]), outer.dim)
                outer.request_count += 1
                body = json.dumps(
                    {
                        "dim": outer.dim,
                        "tokens": states.shape[0],
                        "hidden_states": states.tolist(),
                    }
                ).encode()
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def log_message(self, *args):  # silence request logging
                pass

        self._server = ThreadingHTTPServer(("127.0.0.1", port), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        host, port = self._server.server_address
        return f"http://{host}:{port}"

    def __enter__(self):
        self._thread.start()
        return self

    def __exit__(self, *exc_info):
        self._server.shutdown()
        self._server.server_close()
