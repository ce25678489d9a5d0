"""HTTP client for model backends speaking the /v1 wire protocol.

Endpoints: POST /v1/enhance, POST /v1/translate, POST /v1/embed,
GET /v1/health.  Request bodies are canonical JSON (sorted keys, no
whitespace) so outbound payloads are byte-deterministic.  Transient
failures (connection errors, 429/5xx) are retried with exponential
backoff and jitter; anything else is a protocol violation.
"""

from __future__ import annotations

import base64
import binascii
import json
import random
import time
from dataclasses import dataclass
from typing import Callable, Protocol

import requests


class TransportError(Exception):
    """Request could not be completed (network failure or retries exhausted)."""


class ProtocolError(Exception):
    """Backend response violates the wire contract."""


RETRYABLE_STATUSES = frozenset({429, 500, 502, 503, 504})


@dataclass(frozen=True)
class RetryPolicy:
    """Exponential backoff: base_delay * factor**attempt, plus jitter."""

    attempts: int = 3
    base_delay: float = 0.5
    factor: float = 2.0
    max_delay: float = 30.0
    jitter: float = 0.25

    def __post_init__(self) -> None:
        if self.attempts < 1:
            raise ValueError("retry attempts must be >= 1")

    def delay(self, attempt: int, rng: random.Random) -> float:
        base = min(self.base_delay * self.factor**attempt, self.max_delay)
        return base * (1.0 + self.jitter * rng.random())


class Transport(Protocol):
    """Minimal byte-level transport; raises TransportError on failure."""

    def request(
        self, method: str, url: str, body: bytes | None, timeout: float
    ) -> tuple[int, bytes]: ...


class HttpTransport:
    """requests-backed transport with a pooled session."""

    def __init__(self, session: requests.Session | None = None) -> None:
        self._session = session or requests.Session()

    def request(
        self, method: str, url: str, body: bytes | None, timeout: float
    ) -> tuple[int, bytes]:
        headers = {"Content-Type": "application/json"} if body is not None else None
        try:
            resp = self._session.request(
                method, url, data=body, headers=headers, timeout=timeout
            )
        except requests.RequestException as exc:
            raise TransportError(f"{method} {url}: {exc}") from exc
        return resp.status_code, resp.content


@dataclass(frozen=True)
class HealthStatus:
    ok: bool
    model_id: str
    deterministic: bool


@dataclass(frozen=True)
class ImageResult:
    image: bytes
    format: str
    model_id: str
    attempts: int
    target_domain: str | None = None


@dataclass(frozen=True)
class EmbedResult:
    dims: int
    rows: list[tuple[str, list[float]]]
    attempts: int


def canonical_json(payload: dict) -> bytes:
    return json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode_image(image: bytes) -> str:
    return base64.b64encode(image).decode("ascii")


def decode_image(text: str) -> bytes:
    try:
        return base64.b64decode(text, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise ProtocolError(f"image payload is not valid base64: {exc}") from exc


class BackendClient:
    """Protocol-level client: health, enhance, translate, embed."""

    def __init__(
        self,
        transport: Transport | None = None,
        retry: RetryPolicy = RetryPolicy(),
        timeout: float = 120.0,
        sleep: Callable[[float], None] = time.sleep,
        rng: random.Random | None = None,
    ) -> None:
        self.transport = transport or HttpTransport()
        self.retry = retry
        self.timeout = timeout
        self._sleep = sleep
        self._rng = rng or random.Random()

    def _request_json(
        self, method: str, url: str, payload: dict | None = None
    ) -> tuple[dict, int]:
        """Issue one logical request with retries; returns (json, attempts)."""
        body = canonical_json(payload) if payload is not None else None
        last_error: str = ""
        for attempt in range(self.retry.attempts):
            try:
                status, raw = self.transport.request(method, url, body, self.timeout)
            except TransportError as exc:
                last_error = str(exc)
            else:
                if status == 200:
                    try:
                        doc = json.loads(raw.decode("utf-8"))
                    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                        raise ProtocolError(
                            f"{method} {url}: response is not JSON: {exc}"
                        ) from exc
                    if not isinstance(doc, dict):
                        raise ProtocolError(
                            f"{method} {url}: response is not a JSON object"
                        )
                    return doc, attempt + 1
                if status not in RETRYABLE_STATUSES:
                    raise ProtocolError(
                        f"{method} {url}: HTTP {status}: {raw[:200]!r}"
                    )
                last_error = f"HTTP {status}"
            if attempt + 1 < self.retry.attempts:
                self._sleep(self.retry.delay(attempt, self._rng))
        raise TransportError(
            f"{method} {url} failed after {self.retry.attempts} attempts: {last_error}"
        )

    @staticmethod
    def _field(doc: dict, key: str, url: str):
        if key not in doc:
            raise ProtocolError(f"{url}: response missing field {key!r}")
        return doc[key]

    def health(self, base_url: str) -> HealthStatus:
        url = base_url.rstrip("/") + "/v1/health"
        doc, _ = self._request_json("GET", url)
        return HealthStatus(
            ok=bool(self._field(doc, "ok", url)),
            model_id=str(doc.get("model_id", "")),
            deterministic=bool(doc.get("deterministic", False)),
        )

    def enhance(
        self, base_url: str, image: bytes, prompt: str, seed: int
    ) -> ImageResult:
        url = base_url.rstrip("/") + "/v1/enhance"
        doc, attempts = self._request_json(
            "POST",
            url,
            {
                "image_b64": encode_image(image),
                "format": "png",
                "prompt": prompt,
                "seed": seed,
            },
        )
        return ImageResult(
            image=decode_image(self._field(doc, "image_b64", url)),
            format=str(self._field(doc, "format", url)),
            model_id=str(doc.get("model_id", "")),
            attempts=attempts,
        )

    def translate(
        self, base_url: str, image: bytes, image_format: str, target_domain: str
    ) -> ImageResult:
        url = base_url.rstrip("/") + "/v1/translate"
        doc, attempts = self._request_json(
            "POST",
            url,
            {
                "image_b64": encode_image(image),
                "format": image_format,
                "target_domain": target_domain,
            },
        )
        return ImageResult(
            image=decode_image(self._field(doc, "image_b64", url)),
            format=str(self._field(doc, "format", url)),
            model_id=str(doc.get("model_id", "")),
            attempts=attempts,
            target_domain=str(self._field(doc, "target_domain", url)),
        )

    def embed(self, base_url: str, items: list[tuple[str, bytes]]) -> EmbedResult:
        url = base_url.rstrip("/") + "/v1/embed"
        doc, attempts = self._request_json(
            "POST",
            url,
            {
                "images": [
                    {"id": item_id, "image_b64": encode_image(image)}
                    for item_id, image in items
                ],
                "format": "png",
            },
        )
        dims = self._field(doc, "dims", url)
        raw_rows = self._field(doc, "rows", url)
        if not isinstance(dims, int) or dims <= 0:
            raise ProtocolError(f"{url}: dims must be a positive integer")
        if not isinstance(raw_rows, list):
            raise ProtocolError(f"{url}: rows must be a list")
        rows: list[tuple[str, list[float]]] = []
        for row in raw_rows:
            if not isinstance(row, dict) or "id" not in row or "values" not in row:
                raise ProtocolError(f"{url}: malformed embedding row")
            values = row["values"]
            if not isinstance(values, list) or len(values) != dims:
                raise ProtocolError(
                    f"{url}: row {row.get('id')!r} has {len(values)} values, "
                    f"expected {dims}"
                )
            rows.append((str(row["id"]), [float(v) for v in values]))
        return EmbedResult(dims=dims, rows=rows, attempts=attempts)
