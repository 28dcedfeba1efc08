"""Shared fixtures: a scriptable loopback HTTP endpoint for the remote clients."""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest


class MockEndpoint:
    """Loopback server whose per-request behavior is a queue of script steps.

    Each script entry is either ("ok", text) for a chat-completion-style
    reply, ("plain", payload_dict) for a raw JSON body, or ("fail", status)
    for an HTTP error. An exhausted script repeats its last entry. Requests
    are recorded (path, parsed body) in arrival order.
    """

    def __init__(self):
        self.script: list = []
        self.requests: list = []
        self._lock = threading.Lock()

        mock = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                body = json.loads(self.rfile.read(length) or b"{}")
                with mock._lock:
                    mock.requests.append((self.path, body))
                    step = mock.script[min(len(mock.requests) - 1,
                                           len(mock.script) - 1)]
                kind, payload = step
                if kind == "fail":
                    self.send_response(payload)
                    self.end_headers()
                    return
                if kind == "plain":
                    data = json.dumps(payload).encode()
                else:
                    data = json.dumps(
                        {"choices": [{"message": {"content": payload}}]}
                    ).encode()
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever,
                                        daemon=True)
        self._thread.start()

    @property
    def url(self) -> str:
        host, port = self._server.server_address
        return f"http://{host}:{port}/v1/chat"

    def close(self):
        self._server.shutdown()


@pytest.fixture
def mock_endpoint():
    ep = MockEndpoint()
    yield ep
    ep.close()
