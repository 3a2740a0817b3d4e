"""In-process mock of the inpainting service wire contract."""

from __future__ import annotations

import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from sdm_pipeline.imageio import from_png_b64, png_b64

CANNED_COLOR = (200, 40, 90)


class MockState:
    def __init__(self):
        self.mode = "canned"  # canned | slow | flaky | broken | reject | wrong_size | error | garbage
        self.fail_first = 0
        self.delay = 0.0
        self.requests: list[dict] = []
        self.in_flight = 0
        self.max_in_flight = 0
        self.lock = threading.Lock()


class _Handler(BaseHTTPRequestHandler):
    state: MockState

    def log_message(self, *args):
        pass

    def _send(self, code: int, payload: dict | str):
        body = payload.encode() if isinstance(payload, str) else json.dumps(payload).encode()
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        if self.path == "/v1/health":
            self._send(200, {"ok": True})
        else:
            self._send(404, {"error": "not found"})

    def do_POST(self):
        st = self.state
        if self.path != "/v1/inpaint":
            self._send(404, {"error": "not found"})
            return
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        with st.lock:
            st.requests.append(body)
            n = len(st.requests)
            st.in_flight += 1
            st.max_in_flight = max(st.max_in_flight, st.in_flight)
        try:
            if st.delay:
                time.sleep(st.delay)
            self._respond(st, body, n)
        finally:
            with st.lock:
                st.in_flight -= 1

    def _respond(self, st: MockState, body: dict, n: int):
        missing = {"image_png_b64", "mask_png_b64", "control_png_b64", "prompt", "seed"} - set(body)
        if missing:
            self._send(400, {"error": f"missing {sorted(missing)}"})
            return
        img = from_png_b64(body["image_png_b64"])
        mask = from_png_b64(body["mask_png_b64"])
        ctrl = from_png_b64(body["control_png_b64"])
        if not (img.shape[:2] == mask.shape == ctrl.shape):
            self._send(400, {"error": "dimension mismatch"})
            return
        H, W = img.shape[:2]
        if st.mode == "slow":
            time.sleep(1.0)
        if st.mode == "reject":
            self._send(422, {"error": "prompt rejected"})
            return
        if st.mode == "broken" or (st.mode == "flaky" and n <= st.fail_first):
            self._send(500, {"error": "model crashed"})
            return
        if st.mode == "error":
            self._send(200, {"error": "out of memory"})
            return
        if st.mode == "garbage":
            self._send(200, "<html>")
            return
        if st.mode == "wrong_size":
            H, W = H + 1, W
        out = np.empty((H, W, 3), dtype=np.uint8)
        out[:] = CANNED_COLOR
        self._send(200, {"image_png_b64": png_b64(out)})


class MockServer:
    def __init__(self):
        self.state = MockState()
        handler = type("Handler", (_Handler,), {"state": self.state})
        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), handler)
        self.httpd.daemon_threads = True
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.httpd.shutdown()
        self.httpd.server_close()
