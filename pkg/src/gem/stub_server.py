"""Offline stand-in for a chat-completion scoring endpoint.

Serves scripted replies so the remote scorer can be exercised without a
network: each incoming request is matched to a per-sample script (keyed by
the "sample N" descriptor embedded in the prompt) or to a shared queue.
Script steps are either an int (reply once with that HTTP status), a string
(reply 200 with that content), or ("delay", seconds, content) to stall first.
The final string step of a script is sticky, so retried requests succeed.
"""

from __future__ import annotations

import argparse
import json
import re
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

_SAMPLE_RE = re.compile(r"sample (\d+)")


class _Handler(BaseHTTPRequestHandler):
    def log_message(self, *args):  # keep test output quiet
        pass

    def do_POST(self):
        length = int(self.headers.get("Content-Length", "0"))
        raw = self.rfile.read(length)
        try:
            body = json.loads(raw)
            prompt = _extract_prompt(body)
        except (ValueError, KeyError, TypeError):
            self._reply(400, {"error": "bad request"})
            return
        step = self.server.stub.next_step(prompt)  # type: ignore[attr-defined]
        if isinstance(step, tuple) and step[0] == "delay":
            time.sleep(step[1])
            step = step[2]
        if isinstance(step, int):
            self._reply(step, {"error": f"scripted status {step}"})
            return
        self._reply(200, {
            "id": "stub",
            "choices": [{"message": {"role": "assistant", "content": step}}],
        })

    def _reply(self, status: int, payload: dict):
        data = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)


def _extract_prompt(body: dict) -> str:
    for message in body.get("messages", []):
        content = message.get("content")
        if isinstance(content, list):
            for part in content:
                if part.get("type") == "text":
                    return part.get("text", "")
        elif message.get("role") == "user" and isinstance(content, str):
            return content
    return ""


class StubScoringServer:
    """Threaded HTTP stub; use as a context manager in tests."""

    def __init__(self, scripts: dict[int, list] | None = None,
                 queue: list | None = None, default_reply: str = "[0, 0, 0, 0, 0, 0]"):
        self.scripts = {k: list(v) for k, v in (scripts or {}).items()}
        self.queue = list(queue or [])
        self.default_reply = default_reply
        self.requests_seen = 0
        self._lock = threading.Lock()
        self._httpd = ThreadingHTTPServer(("127.0.0.1", 0), _Handler)
        self._httpd.stub = self  # type: ignore[attr-defined]
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)

    @property
    def endpoint(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}/v1/chat/completions"

    def next_step(self, prompt: str):
        with self._lock:
            self.requests_seen += 1
            match = _SAMPLE_RE.search(prompt)
            if match:
                script = self.scripts.get(int(match.group(1)))
                if script:
                    if len(script) > 1 or isinstance(script[0], int):
                        return script.pop(0)
                    return script[0]  # sticky terminal content
            if self.queue:
                return self.queue.pop(0)
            return self.default_reply

    def __enter__(self) -> "StubScoringServer":
        self._thread.start()
        return self

    def __exit__(self, *exc) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="run the scoring stub server")
    parser.add_argument("--port", type=int, default=8700)
    parser.add_argument("--reply", default="[0, 0, 0, 0, 0, 0]")
    args = parser.parse_args(argv)
    stub = StubScoringServer(default_reply=args.reply)
    httpd = ThreadingHTTPServer(("127.0.0.1", args.port), _Handler)
    httpd.stub = stub  # type: ignore[attr-defined]
    print(f"stub scoring server on 127.0.0.1:{args.port}")
    try:
        httpd.serve_forever()
    except KeyboardInterrupt:
        pass
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
