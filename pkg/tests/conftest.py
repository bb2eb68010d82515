from __future__ import annotations

import json
import threading
from collections.abc import Iterator
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

ACCEPTANCE_LINES: list[str] = []


class ChatStub:
    """Loopback chat-completions server. ``plan`` lists (status, delay) per attempt."""

    def __init__(self) -> None:
        self.plan: list[tuple[int, float]] = []
        self.requests: list[dict] = []
        self.reply = "stub reply"
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self) -> None:
                length = int(self.headers.get("Content-Length", 0))
                body = json.loads(self.rfile.read(length) or b"{}")
                stub.requests.append({"path": self.path, "headers": dict(self.headers), "body": body})
                status, delay = stub.plan.pop(0) if stub.plan else (200, 0.0)
                if delay:
                    threading.Event().wait(delay)
                if status == 200:
                    payload = {"choices": [{"message": {"role": "assistant", "content": stub.reply}}]}
                else:
                    payload = {"error": f"status {status}"}
                data = json.dumps(payload).encode()
                try:
                    self.send_response(status)
                    self.send_header("Content-Type", "application/json")
                    self.send_header("Content-Length", str(len(data)))
                    self.end_headers()
                    self.wfile.write(data)
                except (BrokenPipeError, ConnectionResetError):
                    pass

            def log_message(self, *args) -> None:
                pass

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.server.daemon_threads = True
        self.url = f"http://127.0.0.1:{self.server.server_address[1]}"
        self._thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self._thread.start()

    def close(self) -> None:
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def chat_stub() -> Iterator[ChatStub]:
    stub = ChatStub()
    try:
        yield stub
    finally:
        stub.close()


def pytest_terminal_summary(terminalreporter) -> None:
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
