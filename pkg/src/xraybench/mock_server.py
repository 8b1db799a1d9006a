"""Deterministic offline stand-in for a chat-completion endpoint.

Speaks the same wire format as :func:`xraybench.llm.send`. The reply is a
pure function of the request body:

* when the system prompt carries reference-case lines, the positive
  percentage is the similarity-weighted share of positive references;
* otherwise it is derived from a hash of the attached image.

Prompt tokens are the text estimate plus a fixed image cost, so a request
without an image reports a visibly smaller count. Scripted replies can be
queued for tests (status codes, raw bodies, fixed usage).
"""

from __future__ import annotations

import base64
import hashlib
import json
import re
import threading
from collections import deque
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any

from xraybench.llm import estimate_text_tokens, payload_has_image, payload_text, render_probabilities

IMAGE_TOKENS = 300
_REF_RE = re.compile(r"cosine similarity (-?\d+\.\d+), confirmed COVID-19 (positive|negative)")


@dataclass
class ScriptedReply:
    text: str | None = None
    status: int = 200
    prompt_tokens: int | None = None
    completion_tokens: int | None = None
    raw_body: bytes | None = None
    delay_s: float = 0.0


def deterministic_reply(payload: dict) -> tuple[str, int, int]:
    """(reply text, prompt tokens, completion tokens) for a request payload."""
    text = payload_text(payload)
    refs = _REF_RE.findall(text)
    if refs:
        weights = [(max(float(s), 0.0), lab) for s, lab in refs]
        total = sum(w for w, _ in weights)
        share = sum(w for w, lab in weights if lab == "positive") / total if total else 0.5
        pct = int(round(share * 100 / 5.0)) * 5
    else:
        digest = hashlib.sha256(_image_bytes(payload) or text.encode()).digest()
        pct = digest[0] % 21 * 5
    reply = render_probabilities(pct)
    prompt_tokens = estimate_text_tokens(text) + (IMAGE_TOKENS if payload_has_image(payload) else 0)
    return reply, prompt_tokens, estimate_text_tokens(reply)


def _image_bytes(payload: dict) -> bytes:
    for msg in payload.get("messages", []):
        content = msg.get("content")
        if isinstance(content, list):
            for part in content:
                if part.get("type") == "image_url":
                    url = part["image_url"]["url"]
                    return base64.b64decode(url.split(",", 1)[1])
    return b""


class MockLLMServer:
    """Threaded HTTP server; use as a context manager."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0, *, api_key: str | None = None,
                 path: str = "/v1/chat/completions"):
        self.api_key = api_key
        self.path = path
        self.script: deque[ScriptedReply] = deque()
        self.requests: list[dict[str, Any]] = []
        self._lock = threading.Lock()
        self._httpd = ThreadingHTTPServer((host, port), self._handler_class())
        self._httpd.daemon_threads = True
        self._thread: threading.Thread | None = None

    @property
    def url(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}{self.path}"

    def enqueue(self, *replies: ScriptedReply) -> None:
        with self._lock:
            self.script.extend(replies)

    def start(self) -> "MockLLMServer":
        self._thread = threading.Thread(target=self._httpd.serve_forever, args=(0.05,), daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()

    def serve_forever(self) -> None:
        self._httpd.serve_forever()

    def __enter__(self) -> "MockLLMServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    def _next_script(self) -> ScriptedReply | None:
        with self._lock:
            return self.script.popleft() if self.script else None

    def _handler_class(self):
        server = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):  # keep test output quiet
                pass

            def _reply(self, status: int, body: bytes) -> None:
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                raw = self.rfile.read(length)
                if self.path != server.path:
                    return self._reply(404, b'{"error": "not found"}')
                if server.api_key is not None and self.headers.get("Authorization") != f"Bearer {server.api_key}":
                    return self._reply(401, b'{"error": "invalid api key"}')
                try:
                    payload = json.loads(raw)
                except ValueError:
                    return self._reply(400, b'{"error": "bad json"}')
                with server._lock:
                    server.requests.append(payload)
                scripted = server._next_script()
                text, pt, ct = deterministic_reply(payload)
                status = 200
                if scripted is not None:
                    if scripted.delay_s:
                        threading.Event().wait(scripted.delay_s)
                    if scripted.raw_body is not None:
                        return self._reply(scripted.status, scripted.raw_body)
                    status = scripted.status
                    if scripted.text is not None:
                        text = scripted.text
                        ct = estimate_text_tokens(text)
                    if scripted.prompt_tokens is not None:
                        pt = scripted.prompt_tokens
                    if scripted.completion_tokens is not None:
                        ct = scripted.completion_tokens
                if status != 200:
                    return self._reply(status, json.dumps({"error": f"scripted {status}"}).encode())
                body = {
                    "id": "mock-" + hashlib.sha256(raw).hexdigest()[:12],
                    "object": "chat.completion",
                    "model": payload.get("model", "mock"),
                    "choices": [{"index": 0, "finish_reason": "stop",
                                 "message": {"role": "assistant", "content": text}}],
                    "usage": {"prompt_tokens": pt, "completion_tokens": ct, "total_tokens": pt + ct},
                }
                self._reply(200, json.dumps(body, sort_keys=True).encode())

        return Handler
