from __future__ import annotations

import json

import pytest

from sim2real.remote import (
    BackendClient,
    ProtocolError,
    RetryPolicy,
    TransportError,
    canonical_json,
    decode_image,
)


class ScriptedTransport:
    """Replays a fixed sequence of (status, body) or TransportError."""

    def __init__(self, script):
        self.script = list(script)
        self.calls = []

    def request(self, method, url, body, timeout):
        self.calls.append((method, url, body))
        step = self.script.pop(0)
        if isinstance(step, Exception):
            raise step
        return step


def ok(doc) -> tuple[int, bytes]:
    return 200, json.dumps(doc).encode()


HEALTH = {"ok": True, "model_id": "m", "deterministic": True}


def client_with(script, attempts=3):
    sleeps = []
    transport = ScriptedTransport(script)
    client = BackendClient(
        transport=transport,
        retry=RetryPolicy(attempts=attempts, base_delay=0.5, jitter=0.0),
        sleep=sleeps.append,
    )
    return client, transport, sleeps


class TestRetries:
    def test_flaky_then_success(self):
        client, transport, sleeps = client_with(
            [TransportError("down"), (503, b"busy"), ok(HEALTH)]
        )
        status = client.health("http://backend")
        assert status.ok and status.deterministic
        assert len(transport.calls) == 3
        # exponential backoff: 0.5 then 1.0 (jitter disabled)
        assert sleeps == [0.5, 1.0]

    def test_retries_exhausted_raises_transport_error(self):
        client, transport, _ = client_with(
            [TransportError("down")] * 3, attempts=3
        )
        with pytest.raises(TransportError, match="after 3 attempts"):
            client.health("http://backend")
        assert len(transport.calls) == 3

    def test_non_retryable_status_is_protocol_error(self):
        client, transport, sleeps = client_with([(404, b"nope")])
        with pytest.raises(ProtocolError, match="HTTP 404"):
            client.health("http://backend")
        assert len(transport.calls) == 1 and not sleeps

    def test_429_is_retryable(self):
        client, transport, _ = client_with([(429, b"slow down"), ok(HEALTH)])
        assert client.health("http://backend").ok
        assert len(transport.calls) == 2

    def test_delay_caps_at_max(self):
        policy = RetryPolicy(attempts=10, base_delay=1.0, factor=2.0,
                             max_delay=4.0, jitter=0.0)
        import random
        rng = random.Random(0)
        assert policy.delay(0, rng) == 1.0
        assert policy.delay(5, rng) == 4.0


class TestProtocol:
    def test_non_json_response(self):
        client, _, _ = client_with([(200, b"<html>")])
        with pytest.raises(ProtocolError, match="not JSON"):
            client.health("http://backend")

    def test_missing_field(self):
        client, _, _ = client_with([ok({"nope": 1})])
        with pytest.raises(ProtocolError, match="'ok'"):
            client.health("http://backend")

    def test_enhance_round_trip_and_body(self):
        image = b"\x89PNG-fake"
        doc = {"image_b64": "aGVsbG8=", "format": "png", "model_id": "m1"}
        client, transport, _ = client_with([ok(doc)])
        result = client.enhance("http://backend/", image, "make it real", 3)
        assert result.image == b"hello"
        assert result.model_id == "m1"
        assert result.attempts == 1
        method, url, body = transport.calls[0]
        assert (method, url) == ("POST", "http://backend/v1/enhance")
        sent = json.loads(body)
        assert sent["prompt"] == "make it real"
        assert sent["seed"] == 3
        assert decode_image(sent["image_b64"]) == image

    def test_bad_base64_in_response(self):
        doc = {"image_b64": "!!!", "format": "png", "model_id": "m"}
        client, _, _ = client_with([ok(doc)])
        with pytest.raises(ProtocolError, match="base64"):
            client.enhance("http://backend", b"x", "p", 0)

    def test_embed_row_length_checked(self):
        doc = {"dims": 4, "rows": [{"id": "a", "values": [1.0, 2.0]}]}
        client, _, _ = client_with([ok(doc)])
        with pytest.raises(ProtocolError, match="2 values, expected 4"):
            client.embed("http://backend", [("a", b"img")])

    def test_translate_echoes_domain(self):
        doc = {
            "image_b64": "aGVsbG8=",
            "format": "png",
            "model_id": "m",
            "target_domain": "kitti",
        }
        client, transport, _ = client_with([ok(doc)])
        result = client.translate("http://backend", b"x", "png", "kitti")
        assert result.target_domain == "kitti"
        assert json.loads(transport.calls[0][2])["target_domain"] == "kitti"


def test_canonical_json_is_sorted_and_compact():
    assert canonical_json({"b": 1, "a": [1, 2]}) == b'{"a":[1,2],"b":1}'
    assert canonical_json({"a": 1}) == canonical_json({"a": 1})
