from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sim2real.dataset import load_manifest
from sim2real.embeddings import (
    DegenerateRowError,
    EmbeddingMatrix,
    FormatError,
    embed_manifest,
    embed_remote,
    normalize_rows,
    read_embeddings,
    write_embeddings,
)
from sim2real.remote import BackendClient, ProtocolError, RetryPolicy

from helpers import write_dataset
from stubserver import StubServer


def matrix(ids, rows) -> EmbeddingMatrix:
    return EmbeddingMatrix(
        ids=tuple(ids), data=np.asarray(rows, dtype=np.float32)
    )


class TestFormat:
    def test_file_size_is_header_plus_ids_plus_payload(self, tmp_path):
        m = matrix(["a", "bc"], [[1, 2, 3], [4, 5, 6]])
        path = tmp_path / "m.semb"
        write_embeddings(m, path)
        id_block = (4 + 1) + (4 + 2)
        assert path.stat().st_size == 24 + id_block + 2 * 3 * 4

    def test_empty_matrix_rejected(self, tmp_path):
        m = EmbeddingMatrix(ids=(), data=np.zeros((0, 4), dtype=np.float32))
        with pytest.raises(FormatError, match="n = 0"):
            write_embeddings(m, tmp_path / "m.semb")

    def test_round_trip_identity(self, tmp_path):
        m = matrix(["x", "y", "z"], np.random.default_rng(0).normal(size=(3, 5)))
        path = tmp_path / "m.semb"
        write_embeddings(m, path)
        back = read_embeddings(path)
        assert back.ids == m.ids
        assert back.data.tobytes() == m.data.tobytes()

    def test_write_is_byte_deterministic(self, tmp_path):
        m = matrix(["a", "b"], np.random.default_rng(1).normal(size=(2, 7)))
        p1, p2 = tmp_path / "a.semb", tmp_path / "b.semb"
        write_embeddings(m, p1)
        write_embeddings(m, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "m.semb"
        write_embeddings(matrix(["a"], [[1.0, 2.0]]), path)
        corrupted = b"XEMB" + path.read_bytes()[4:]
        path.write_bytes(corrupted)
        with pytest.raises(FormatError, match="magic"):
            read_embeddings(path)

    def test_bad_version_rejected(self, tmp_path):
        path = tmp_path / "m.semb"
        write_embeddings(matrix(["a"], [[1.0, 2.0]]), path)
        raw = bytearray(path.read_bytes())
        raw[4] = 9
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="version"):
            read_embeddings(path)

    def test_truncated_payload_names_byte_counts(self, tmp_path):
        path = tmp_path / "m.semb"
        write_embeddings(matrix(["a", "b"], [[1, 2, 3], [4, 5, 6]]), path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-5])
        with pytest.raises(FormatError, match="expected 24 bytes, got 19"):
            read_embeddings(path)

    def test_trailing_garbage_rejected(self, tmp_path):
        path = tmp_path / "m.semb"
        write_embeddings(matrix(["a"], [[1.0]]), path)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(FormatError, match="payload size"):
            read_embeddings(path)

    def test_truncated_id_block_rejected(self, tmp_path):
        path = tmp_path / "m.semb"
        write_embeddings(matrix(["abcdef"], [[1.0]]), path)
        path.write_bytes(path.read_bytes()[:26])
        with pytest.raises(FormatError, match="truncated id"):
            read_embeddings(path)

    @settings(max_examples=40, deadline=None)
    @given(
        ids=st.lists(st.text(min_size=0, max_size=12), min_size=1, max_size=8),
        d=st.integers(min_value=1, max_value=9),
        seed=st.integers(min_value=0, max_value=2**31),
    )
    def test_round_trip_property(self, tmp_path_factory, ids, d, seed):
        rng = np.random.default_rng(seed)
        m = matrix(ids, rng.normal(size=(len(ids), d)).astype(np.float32))
        path = tmp_path_factory.mktemp("semb") / "m.semb"
        write_embeddings(m, path)
        back = read_embeddings(path)
        assert back.ids == m.ids
        assert back.data.tobytes() == m.data.tobytes()


class TestNormalize:
    def test_three_four_becomes_point_six_point_eight(self):
        m = normalize_rows(matrix(["a"], [[3.0, 4.0]]))
        assert m.data[0] == pytest.approx([0.6, 0.8], abs=1e-7)

    def test_unit_row_unchanged(self):
        m = normalize_rows(matrix(["a"], [[1.0, 0.0]]))
        assert m.data[0].tolist() == [1.0, 0.0]

    def test_zero_row_raises_with_index(self):
        with pytest.raises(DegenerateRowError, match="row 1"):
            normalize_rows(matrix(["a", "b"], [[1.0, 0.0], [0.0, 0.0]]))

    def test_all_norms_hit_one(self):
        rng = np.random.default_rng(5)
        m = normalize_rows(matrix(list("abcdef"), rng.normal(size=(6, 16))))
        norms = np.linalg.norm(m.data.astype(np.float64), axis=1)
        assert np.abs(norms - 1.0).max() < 1e-5

    @settings(max_examples=50, deadline=None)
    @given(
        n=st.integers(min_value=1, max_value=6),
        d=st.integers(min_value=1, max_value=12),
        seed=st.integers(min_value=0, max_value=2**31),
    )
    def test_idempotent_within_1e7(self, n, d, seed):
        rng = np.random.default_rng(seed)
        data = rng.normal(size=(n, d)) * rng.uniform(0.1, 100)
        once = normalize_rows(matrix([str(i) for i in range(n)], data))
        twice = normalize_rows(once)
        assert np.abs(twice.data - once.data).max() <= 1e-7


class TestEmbedRemote:
    def test_batching_and_row_order(self, tmp_path):
        manifest = load_manifest(write_dataset(tmp_path, n_images=5))
        with StubServer() as server:
            m = embed_manifest(server.url, manifest, batch_size=2)
            assert server.backend.request_count("/v1/embed") == 3
        assert m.ids == tuple(r.id for r in manifest.records)
        assert m.dims == 16
        # deterministic embedder: same bytes give the same row
        with StubServer() as server:
            again = embed_manifest(server.url, manifest, batch_size=5)
        assert np.array_equal(m.data, again.data)

    def test_order_independent_of_concurrency(self, tmp_path):
        manifest = load_manifest(write_dataset(tmp_path, n_images=6))
        with StubServer() as server:
            serial = embed_manifest(server.url, manifest, batch_size=2)
            threaded = embed_manifest(
                server.url, manifest, batch_size=2, max_in_flight=3
            )
        assert serial.ids == threaded.ids
        assert np.array_equal(serial.data, threaded.data)

    def test_empty_input_rejected(self):
        with pytest.raises(ValueError, match="no images"):
            embed_remote("http://unused", [], root=".")

    def test_dims_change_between_batches_is_protocol_error(self, tmp_path):
        manifest = load_manifest(write_dataset(tmp_path, n_images=4))

        class ShrinkingDims:
            def __init__(self):
                self.calls = 0

            def request(self, method, url, body, timeout):
                doc = json.loads(body)
                self.calls += 1
                dims = 8 if self.calls == 1 else 4
                rows = [
                    {"id": item["id"], "values": [1.0] * dims}
                    for item in doc["images"]
                ]
                return 200, json.dumps({"dims": dims, "rows": rows}).encode()

        client = BackendClient(transport=ShrinkingDims())
        with pytest.raises(ProtocolError, match="dims changed"):
            embed_manifest("http://fake", manifest, batch_size=2, client=client)

    def test_missing_row_is_protocol_error(self, tmp_path):
        manifest = load_manifest(write_dataset(tmp_path, n_images=2))

        class DropsRows:
            def request(self, method, url, body, timeout):
                doc = json.loads(body)
                rows = [
                    {"id": item["id"], "values": [1.0] * 4}
                    for item in doc["images"][:-1]
                ]
                return 200, json.dumps({"dims": 4, "rows": rows}).encode()

        client = BackendClient(transport=DropsRows())
        with pytest.raises(ProtocolError, match="missing row"):
            embed_manifest("http://fake", manifest, batch_size=2, client=client)

    def test_retries_then_succeeds_on_flaky_backend(self, tmp_path):
        manifest = load_manifest(write_dataset(tmp_path, n_images=2))
        from stubserver import StubBackend

        backend = StubBackend(flaky_failures=2)
        client = BackendClient(
            retry=RetryPolicy(attempts=3, base_delay=0.001), sleep=lambda s: None
        )
        with StubServer(backend) as server:
            m = embed_manifest(server.url, manifest, batch_size=4, client=client)
        assert m.n == 2
