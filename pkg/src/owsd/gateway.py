"""HTTP services: the mock cloud classifier and the organization-side gateway.

Both speak JSON over HTTP. An image travels as

    {"image_b64": <base64 of float32 little-endian, row-major H x W x C>,
     "height": H, "width": W, "channels": C}

Errors always carry a machine-readable ``error_code``.
"""

from __future__ import annotations

import base64
import json
import logging
import os
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Sequence

import numpy as np

from .cloud import CloudModel
from .errors import (
    BudgetExhaustedError,
    CloudUnreachableError,
    OWSDError,
    ShapeError,
    StaleIINError,
    WireError,
)
from .pipeline import Pipeline, _require_scrambled
from .scrambler import ScrambledImage

log = logging.getLogger(__name__)

ENV_CLOUD_URL = "OWSD_CLOUD_URL"
ENV_PORT = "OWSD_PORT"
ENV_STATE_PATH = "OWSD_STATE_PATH"


# -- wire format ------------------------------------------------------------


def encode_image(pixels: np.ndarray) -> dict:
    pixels = np.asarray(pixels)
    if pixels.ndim != 3:
        raise ShapeError(f"an image must be H x W x C, got shape {pixels.shape}")
    h, w, c = pixels.shape
    raw = np.ascontiguousarray(pixels, dtype="<f4").tobytes()
    return {"image_b64": base64.b64encode(raw).decode("ascii"), "height": h, "width": w, "channels": c}


def image_body(pixels: np.ndarray) -> bytes:
    """The exact request body sent for ``pixels`` (keys sorted, compact)."""
    return json.dumps(encode_image(pixels), sort_keys=True, separators=(",", ":")).encode()


def decode_image(payload: dict) -> np.ndarray:
    """Inverse of :func:`encode_image`; returns float64 pixels.

    Raises ``WireError`` with 400 ``bad_request`` for structural problems and
    422 ``shape_mismatch`` when the byte count disagrees with the dimensions.
    """
    if not isinstance(payload, dict):
        raise WireError("request body must be a JSON object")
    missing = [k for k in ("image_b64", "height", "width", "channels") if k not in payload]
    if missing:
        raise WireError(f"missing field(s): {', '.join(missing)}")
    dims = [payload["height"], payload["width"], payload["channels"]]
    if not all(isinstance(d, int) and not isinstance(d, bool) and d > 0 for d in dims):
        raise WireError("height, width and channels must be positive integers")
    if not isinstance(payload["image_b64"], str):
        raise WireError("image_b64 must be a base64 string")
    try:
        raw = base64.b64decode(payload["image_b64"], validate=True)
    except ValueError as exc:
        raise WireError(f"image_b64 is not valid base64: {exc}") from None
    h, w, c = dims
    if len(raw) != 4 * h * w * c:
        raise WireError(
            f"payload has {len(raw)} bytes, {h}x{w}x{c} float32 needs {4 * h * w * c}",
            status=422,
            error_code="shape_mismatch",
        )
    pixels = np.frombuffer(raw, dtype="<f4").reshape(h, w, c).astype(np.float64)
    if not np.isfinite(pixels).all():
        raise WireError("pixels must be finite")
    return pixels


def _parse_json(body: bytes):
    try:
        return json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WireError(f"malformed JSON: {exc}") from None


# -- shared server plumbing -------------------------------------------------


Route = Callable[[bytes], tuple[int, dict]]


def _handler_class(routes: dict[tuple[str, str], Route]):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):
            log.debug("%s %s", self.address_string(), fmt % args)

        def _dispatch(self, method: str):
            length = int(self.headers.get("Content-Length") or 0)
            body = self.rfile.read(length) if length else b""
            route = routes.get((method, self.path.split("?")[0]))
            if route is None:
                status, payload = 404, {"error_code": "not_found", "message": f"no route {method} {self.path}"}
            else:
                try:
                    status, payload = route(body)
                except WireError as exc:
                    status, payload = exc.status, {"error_code": exc.error_code, "message": str(exc)}
                except Exception as exc:  # keep the server alive, report the failure
                    log.exception("unhandled error")
                    status, payload = 500, {"error_code": "internal_error", "message": str(exc)}
            data = json.dumps(payload).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def do_GET(self):
            self._dispatch("GET")

        def do_POST(self):
            self._dispatch("POST")

    return Handler


class Service:
    """A running HTTP server on a background thread."""

    def __init__(self, routes: dict[tuple[str, str], Route], host: str, port: int):
        try:
            self.server = ThreadingHTTPServer((host, port), _handler_class(routes))
        except OSError as exc:
            raise OWSDError(f"cannot listen on {host}:{port}: {exc.strerror or exc}") from exc
        self.server.daemon_threads = True
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()

    @property
    def port(self) -> int:
        return self.server.server_address[1]

    @property
    def url(self) -> str:
        host = self.server.server_address[0]
        return f"http://{host}:{self.port}"

    def stop(self) -> None:
        self.server.shutdown()
        self.server.server_close()
        self.thread.join(timeout=5)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


# -- mock cloud -------------------------------------------------------------


class CloudService(Service):
    def __init__(self, model: CloudModel, host: str = "127.0.0.1", port: int = 0):
        self.model = model
        self.request_count = 0
        self._count_lock = threading.Lock()
        super().__init__(
            {("GET", "/v1/health"): self._health, ("POST", "/v1/predict"): self._predict}, host, port
        )

    def _health(self, body: bytes):
        return 200, {"status": "ok", "model_id": self.model.model_id, "labels": list(self.model.label_names)}

    def _predict(self, body: bytes):
        with self._count_lock:
            self.request_count += 1
        pixels = decode_image(_parse_json(body))
        if pixels.shape != self.model.input_shape:
            raise WireError(
                f"model takes {self.model.input_shape} images, got {pixels.shape}",
                status=422,
                error_code="shape_mismatch",
            )
        probs = self.model.classify(pixels).probs
        return 200, {
            "model_id": self.model.model_id,
            "probabilities": [float(p) for p in probs],
            "labels": list(self.model.label_names),
        }


def serve_cloud(model: CloudModel, port: int = 0, host: str = "127.0.0.1") -> CloudService:
    """Start the mock cloud classifier; ``port=0`` picks a free port."""
    return CloudService(model, host, port)


# -- cloud client over HTTP -------------------------------------------------


def _request(url: str, body: bytes | None, timeout: float) -> dict:
    req = urllib.request.Request(url, data=body, method="POST" if body is not None else "GET")
    if body is not None:
        req.add_header("Content-Type", "application/json")
    with urllib.request.urlopen(req, timeout=timeout) as resp:
        return json.loads(resp.read())


class HttpCloud:
    """Cloud client for a remote ``/v1/predict`` endpoint.

    Each scrambled image is one request. Only :class:`ScrambledImage` values
    are accepted. Any transport or server failure becomes
    :class:`CloudUnreachableError`.
    """

    def __init__(self, url: str, timeout: float = 30.0):
        self.url = url.rstrip("/")
        self.timeout = timeout
        try:
            health = _request(self.url + "/v1/health", None, timeout)
        except (urllib.error.URLError, OSError, ValueError) as exc:
            raise CloudUnreachableError(f"cloud at {self.url} failed its health check: {exc}") from exc
        if health.get("status") != "ok":
            raise CloudUnreachableError(f"cloud at {self.url} reports status {health.get('status')!r}")
        self.model_id = health["model_id"]
        self.labels = list(health.get("labels", []))
        self.n_labels = len(self.labels)

    def submit(self, images: Sequence[ScrambledImage]) -> np.ndarray:
        _require_scrambled(images)
        out = []
        for i, im in enumerate(images):
            try:
                resp = _request(self.url + "/v1/predict", image_body(im.pixels), self.timeout)
            except (urllib.error.URLError, OSError, ValueError) as exc:
                raise CloudUnreachableError(f"cloud request failed: {exc}", delivered=i) from exc
            out.append(resp["probabilities"])
        return np.array(out, dtype=np.float64).reshape(len(images), -1)


# -- gateway ----------------------------------------------------------------


@dataclass
class GatewaySettings:
    cloud_url: str | None
    port: int
    state_path: str | None

    @classmethod
    def from_env(cls, cloud_url=None, port=None, state_path=None) -> "GatewaySettings":
        """Explicit arguments win over the environment."""
        env_port = os.environ.get(ENV_PORT)
        return cls(
            cloud_url=cloud_url or os.environ.get(ENV_CLOUD_URL),
            port=int(port if port is not None else (env_port or 8080)),
            state_path=state_path or os.environ.get(ENV_STATE_PATH),
        )


class GatewayService(Service):
    def __init__(self, pipeline: Pipeline, host: str = "127.0.0.1", port: int = 0):
        if pipeline.iin is None:
            raise StaleIINError("the gateway needs a trained inference network")
        self.pipeline = pipeline
        super().__init__(
            {("GET", "/v1/health"): self._health, ("POST", "/v1/classify"): self._classify}, host, port
        )

    def _budget_fields(self) -> dict:
        b = self.pipeline.budget
        return {"key_id": b.key_id, "submissions_used": b.submissions_used, "submissions_limit": b.limit}

    def _health(self, body: bytes):
        return 200, {"status": "ok", **self._budget_fields()}

    def _classify(self, body: bytes):
        pixels = decode_image(_parse_json(body))
        expected = self.pipeline.encoders[0].input_shape
        if pixels.shape != expected:
            raise WireError(f"gateway takes {expected} images, got {pixels.shape}", 422, "shape_mismatch")
        try:
            probs = self.pipeline.infer(pixels)
        except BudgetExhaustedError as exc:
            return 429, {"error_code": exc.error_code, "message": str(exc), **self._budget_fields()}
        except CloudUnreachableError as exc:
            return 502, {"error_code": exc.error_code, "message": str(exc), **self._budget_fields()}
        except StaleIINError as exc:
            return 409, {"error_code": "stale_iin", "message": str(exc)}
        names = self.pipeline.iin.label_names
        return 200, {
            "label": names[int(np.argmax(probs))],
            "probabilities": [float(p) for p in probs],
            **self._budget_fields(),
        }


def serve_gateway(pipeline: Pipeline, port: int = 0, host: str = "127.0.0.1") -> GatewayService:
    """Start the gateway in front of ``pipeline`` (whose cloud is usually an
    :class:`HttpCloud`, health-checked when it was constructed)."""
    return GatewayService(pipeline, host, port)
