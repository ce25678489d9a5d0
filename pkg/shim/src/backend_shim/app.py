"""FastAPI application implementing the /v1 backend wire protocol.

Endpoints: POST /v1/enhance, POST /v1/translate, POST /v1/embed,
GET /v1/health.  Mock modes serve testing: identity echoes image bytes
unchanged, blur applies a dimension-preserving Gaussian blur, resize_bug
deliberately doubles the image size (to exercise client-side dimension
checks), echo_capture persists request bodies byte-exact for golden
tests.  real_adapter delegates image transforms to a user-supplied
callable, which is where actual diffusion / image-to-image models plug in.

Request bodies are parsed by hand so error envelopes stay exactly
{code, message}: 400 for malformed bodies, 422 for unknown target
domains, 503 for adapter failures.
"""

from __future__ import annotations

import base64
import binascii
import hashlib
import importlib
import io
import threading
import traceback
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from PIL import Image, ImageFilter

MODES = ("identity", "blur", "resize_bug", "echo_capture", "real_adapter")
TARGET_DOMAINS = ("kitti", "cs")
EMBED_DIMS = 16


@dataclass
class ShimConfig:
    """Server settings; exactly one mode is active per instance."""

    mode: str = "identity"
    port: int = 8080
    deterministic: bool = True
    capture_dir: Path | None = None
    adapter: Callable[[bytes, dict], bytes] | None = None
    model_id: str | None = None

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode {self.mode!r} not one of {', '.join(MODES)}")
        if self.mode == "echo_capture" and self.capture_dir is None:
            raise ValueError("echo_capture mode requires a capture directory")
        if self.mode == "real_adapter" and self.adapter is None:
            raise ValueError("real_adapter mode requires an adapter callable")


def load_adapter(spec: str) -> Callable[[bytes, dict], bytes]:
    """Resolve a "package.module:attribute" spec to the adapter callable."""
    module_name, _, attr = spec.partition(":")
    if not module_name or not attr:
        raise ValueError(f"adapter spec {spec!r} must look like module:attribute")
    module = importlib.import_module(module_name)
    adapter = getattr(module, attr)
    if not callable(adapter):
        raise ValueError(f"adapter {spec!r} is not callable")
    return adapter


def pseudo_embedding(image: bytes, dims: int = EMBED_DIMS) -> list[float]:
    """Digest expansion of image bytes to dims floats in (0, 1].

    Values are strictly positive so rows always normalize; the same bytes
    always produce the same row.
    """
    values = []
    for i in range(dims):
        digest = hashlib.sha256(image + i.to_bytes(4, "little")).digest()
        u = int.from_bytes(digest[:8], "little")
        values.append((u % (1 << 53) + 1) / float(1 << 53))
    return values


def _error(status: int, code: str, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"code": code, "message": message})


def _decode_b64(text: str) -> bytes:
    return base64.b64decode(text, validate=True)


class _Capture:
    """Serialized byte-exact request persistence for echo_capture mode."""

    def __init__(self, directory: Path) -> None:
        self.directory = directory
        self.directory.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._seq = 0

    def save(self, endpoint: str, body: bytes) -> None:
        with self._lock:
            self._seq += 1
            name = f"{self._seq:06d}-{endpoint.strip('/').replace('/', '_')}.json"
            (self.directory / name).write_bytes(body)


def create_app(config: ShimConfig) -> FastAPI:
    app = FastAPI(title="backend-shim", docs_url=None, redoc_url=None)
    capture = (
        _Capture(Path(config.capture_dir)) if config.mode == "echo_capture" else None
    )
    model_id = config.model_id or f"shim-{config.mode}"

    def transform(image: bytes, params: dict) -> bytes:
        if config.mode in ("identity", "echo_capture"):
            return image
        if config.mode == "blur":
            with Image.open(io.BytesIO(image)) as img:
                blurred = img.filter(ImageFilter.GaussianBlur(radius=2))
                buf = io.BytesIO()
                blurred.save(buf, format="PNG")
                return buf.getvalue()
        if config.mode == "resize_bug":
            with Image.open(io.BytesIO(image)) as img:
                doubled = img.resize((img.width * 2, img.height * 2))
                buf = io.BytesIO()
                doubled.save(buf, format="PNG")
                return buf.getvalue()
        return config.adapter(image, params)

    async def read_body(request: Request) -> tuple[dict | None, bytes]:
        body = await request.body()
        try:
            doc = request_json(body)
        except ValueError:
            return None, body
        return doc, body

    def request_json(body: bytes) -> dict:
        import json

        doc = json.loads(body.decode("utf-8"))
        if not isinstance(doc, dict):
            raise ValueError("not an object")
        return doc

    @app.get("/v1/health")
    async def health() -> dict:
        return {
            "ok": True,
            "model_id": model_id,
            "deterministic": config.deterministic,
        }

    @app.post("/v1/enhance")
    async def enhance(request: Request):
        doc, body = await read_body(request)
        if doc is None:
            return _error(400, "bad_request", "body is not a JSON object")
        for key in ("image_b64", "format", "prompt", "seed"):
            if key not in doc:
                return _error(400, "bad_request", f"missing field {key!r}")
        if not isinstance(doc["prompt"], str) or not doc["prompt"]:
            return _error(400, "bad_request", "prompt must be a non-empty string")
        try:
            image = _decode_b64(doc["image_b64"])
        except (binascii.Error, ValueError):
            return _error(400, "bad_request", "image_b64 is not valid base64")
        if capture:
            capture.save("/v1/enhance", body)
        try:
            output = transform(
                image, {"prompt": doc["prompt"], "seed": doc["seed"]}
            )
        except Exception as exc:
            return _error(503, "adapter_error", _summarize(exc))
        return {
            "image_b64": base64.b64encode(output).decode("ascii"),
            "format": "png",
            "model_id": model_id,
        }

    @app.post("/v1/translate")
    async def translate(request: Request):
        doc, body = await read_body(request)
        if doc is None:
            return _error(400, "bad_request", "body is not a JSON object")
        for key in ("image_b64", "format", "target_domain"):
            if key not in doc:
                return _error(400, "bad_request", f"missing field {key!r}")
        domain = doc["target_domain"]
        if domain not in TARGET_DOMAINS:
            return _error(
                422,
                "unknown_domain",
                f"target_domain {domain!r} not one of {', '.join(TARGET_DOMAINS)}",
            )
        try:
            image = _decode_b64(doc["image_b64"])
        except (binascii.Error, ValueError):
            return _error(400, "bad_request", "image_b64 is not valid base64")
        if capture:
            capture.save("/v1/translate", body)
        try:
            output = transform(image, {"target_domain": domain})
        except Exception as exc:
            return _error(503, "adapter_error", _summarize(exc))
        return {
            "image_b64": base64.b64encode(output).decode("ascii"),
            "format": "png",
            "model_id": model_id,
            "target_domain": domain,
        }

    @app.post("/v1/embed")
    async def embed(request: Request):
        doc, body = await read_body(request)
        if doc is None:
            return _error(400, "bad_request", "body is not a JSON object")
        items = doc.get("images")
        if not isinstance(items, list) or not items:
            return _error(400, "bad_request", "images must be a non-empty list")
        if capture:
            capture.save("/v1/embed", body)
        rows = []
        for item in items:
            if not isinstance(item, dict) or "id" not in item or "image_b64" not in item:
                return _error(
                    400, "bad_request", "each image needs id and image_b64"
                )
            try:
                image = _decode_b64(item["image_b64"])
            except (binascii.Error, ValueError):
                return _error(
                    400, "bad_request",
                    f"image_b64 for {item.get('id')!r} is not valid base64",
                )
            rows.append({"id": item["id"], "values": pseudo_embedding(image)})
        return {"dims": EMBED_DIMS, "rows": rows}

    return app


def _summarize(exc: Exception) -> str:
    frames = traceback.extract_tb(exc.__traceback__)
    location = f" at {frames[-1].filename}:{frames[-1].lineno}" if frames else ""
    return f"{type(exc).__name__}: {exc}{location}"
