"""HTTP service speaking the guidance wire protocol.

GET  /v1/schedule -> {"T": int, "alpha_bar": [float, ...]}
POST /v1/guidance -> {"grads": ["<base64 float32 HxWx3 LE>", ...]} or {"error": str}

Requests are served one at a time per hosted model (a lock guards
inference); the HTTP layer itself is threaded so slow clients cannot wedge
the handshake.
"""

from __future__ import annotations

import base64
import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from bridge.config import BridgeConfig, BridgeError
from bridge.model import ProceduralSphereModel


def _decode_image(entry: dict) -> np.ndarray:
    h, w = int(entry["height"]), int(entry["width"])
    raw = base64.b64decode(entry["rgb"].encode("ascii"))
    if len(raw) != 4 * h * w * 3:
        raise BridgeError(f"image payload {len(raw)} bytes, expected {4 * h * w * 3}")
    return np.frombuffer(raw, dtype="<f4").reshape(h, w, 3).astype(float)


def _encode_image(img: np.ndarray) -> str:
    return base64.b64encode(img.astype("<f4").tobytes()).decode("ascii")


def handle_guidance(model, payload: dict) -> dict:
    try:
        images = [_decode_image(e) for e in payload["images"]]
        cameras = [e["camera"] for e in payload["images"]]
        grads = model.pixel_gradients(
            payload["mode"],
            payload["prompt"],
            payload.get("negative_prompt", ""),
            int(payload["timestep"]),
            float(payload["cfg_scale"]),
            images,
            cameras,
        )
    except (BridgeError, KeyError, ValueError, TypeError) as exc:
        return {"error": f"{type(exc).__name__}: {exc}"}
    return {"grads": [_encode_image(g) for g in grads]}


class _Handler(BaseHTTPRequestHandler):
    model = None
    inference_lock = None

    def _send(self, code: int, obj: dict) -> None:
        body = json.dumps(obj).encode("utf-8")
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        if self.path == "/v1/schedule":
            self._send(200, self.model.schedule())
        else:
            self._send(404, {"error": f"unknown path {self.path}"})

    def do_POST(self):
        if self.path != "/v1/guidance":
            self._send(404, {"error": f"unknown path {self.path}"})
            return
        try:
            length = int(self.headers.get("Content-Length", "0"))
            payload = json.loads(self.rfile.read(length))
        except (ValueError, json.JSONDecodeError) as exc:
            self._send(400, {"error": f"bad request: {exc}"})
            return
        with self.inference_lock:
            result = handle_guidance(self.model, payload)
        self._send(200 if "grads" in result else 400, result)

    def log_message(self, fmt, *args):  # keep test output quiet
        pass


def make_server(config: BridgeConfig) -> ThreadingHTTPServer:
    """Build (but do not run) the service; raises on model-load failure."""
    model = ProceduralSphereModel(precision=config.precision)
    handler = type(
        "BoundHandler",
        (_Handler,),
        {"model": model, "inference_lock": threading.Lock()},
    )
    return ThreadingHTTPServer((config.host, config.port), handler)


def serve_guidance(config: BridgeConfig) -> None:
    """Run the guidance service until interrupted."""
    server = make_server(config)
    try:
        server.serve_forever()
    finally:
        server.server_close()
