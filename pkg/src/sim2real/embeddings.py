"""Bit-exact embedding matrix file format and row normalization.

The on-disk format is deliberately language-neutral: every field is
little-endian and the float payload is raw IEEE-754 float32, so any
implementation reads back the identical bits it wrote.

Layout: magic "SEMB" | version u32 = 1 | n u64 | d u64 |
id block (n length-prefixed UTF-8 strings, u32 lengths) |
payload n*d float32, row-major.

Files hold raw embedder output; normalization happens at metric time.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import DatasetManifest, ImageRecord
from .remote import BackendClient, ProtocolError

MAGIC = b"SEMB"
VERSION = 1
HEADER = struct.Struct("<4sIQQ")


class FormatError(Exception):
    """Embedding file violates the format (magic, version, sizes)."""


class DegenerateRowError(Exception):
    """A row has zero norm and cannot be normalized."""


@dataclass(frozen=True)
class EmbeddingMatrix:
    """n x d float32 embedding rows with aligned image ids."""

    ids: tuple[str, ...]
    data: np.ndarray

    def __post_init__(self) -> None:
        if self.data.ndim != 2:
            raise ValueError("embedding data must be a 2-D array")
        if self.data.dtype != np.float32:
            raise ValueError(f"embedding dtype must be float32, got {self.data.dtype}")
        if self.data.shape[1] < 1:
            raise ValueError("embedding dimensionality must be positive")
        if len(self.ids) != self.data.shape[0]:
            raise ValueError(
                f"{len(self.ids)} ids for {self.data.shape[0]} embedding rows"
            )
        if not np.isfinite(self.data).all():
            raise ValueError("embedding rows must be finite")

    @property
    def n(self) -> int:
        return int(self.data.shape[0])

    @property
    def dims(self) -> int:
        return int(self.data.shape[1])


def write_embeddings(matrix: EmbeddingMatrix, path: str | Path) -> None:
    """Write a matrix byte-deterministically; rejects empty matrices."""
    if matrix.n < 1:
        raise FormatError("cannot write an empty embedding matrix (n = 0)")
    chunks = [HEADER.pack(MAGIC, VERSION, matrix.n, matrix.dims)]
    for item_id in matrix.ids:
        encoded = item_id.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
    chunks.append(np.ascontiguousarray(matrix.data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_embeddings(path: str | Path) -> EmbeddingMatrix:
    """Read a matrix back bit-for-bit; FormatError on any corruption."""
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise FormatError(
            f"file too short for header: expected at least {HEADER.size} bytes, "
            f"got {len(raw)}"
        )
    magic, version, n, d = HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}, expected {VERSION}")
    if n < 1 or d < 1:
        raise FormatError(f"invalid shape n={n}, d={d}")

    offset = HEADER.size
    ids: list[str] = []
    for i in range(n):
        if offset + 4 > len(raw):
            raise FormatError(
                f"truncated id block at row {i}: expected 4 length bytes at "
                f"offset {offset}, file has {len(raw)} bytes"
            )
        (length,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        if offset + length > len(raw):
            raise FormatError(
                f"truncated id at row {i}: expected {length} bytes at "
                f"offset {offset}, file has {len(raw)} bytes"
            )
        try:
            ids.append(raw[offset : offset + length].decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise FormatError(f"id at row {i} is not valid UTF-8: {exc}") from exc
        offset += length

    expected = n * d * 4
    actual = len(raw) - offset
    if actual != expected:
        raise FormatError(
            f"payload size mismatch: expected {expected} bytes, got {actual}"
        )
    data = np.frombuffer(raw, dtype="<f4", count=n * d, offset=offset)
    data = np.ascontiguousarray(data.reshape(n, d), dtype=np.float32)
    try:
        return EmbeddingMatrix(ids=tuple(ids), data=data)
    except ValueError as exc:
        raise FormatError(str(exc)) from exc


def normalize_rows(matrix: EmbeddingMatrix) -> EmbeddingMatrix:
    """Scale every row to unit L2 norm; ids preserved.

    Norms are taken in float64 before casting back to float32, so a second
    application is a no-op to well under 1e-7 per component.
    """
    wide = matrix.data.astype(np.float64)
    norms = np.linalg.norm(wide, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise DegenerateRowError(
            f"row {int(zero[0])} (id {matrix.ids[int(zero[0])]!r}) has zero norm"
        )
    return EmbeddingMatrix(
        ids=matrix.ids,
        data=(wide / norms[:, None]).astype(np.float32),
    )


def embed_remote(
    endpoint: str,
    records: list[ImageRecord] | tuple[ImageRecord, ...],
    *,
    root: str | Path,
    batch_size: int = 16,
    client: BackendClient | None = None,
    max_in_flight: int = 1,
) -> EmbeddingMatrix:
    """Fetch embeddings for the records from a /v1/embed endpoint.

    Rows come back ordered exactly like the input records regardless of
    batching or request concurrency; a dimensionality change between
    batches is a ProtocolError.
    """
    if not records:
        raise ValueError("no images to embed")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    client = client or BackendClient()
    root = Path(root)

    batches = [
        list(records[i : i + batch_size]) for i in range(0, len(records), batch_size)
    ]

    def run_batch(batch: list[ImageRecord]) -> tuple[int, list[list[float]]]:
        items = [(rec.id, (root / rec.path).read_bytes()) for rec in batch]
        result = client.embed(endpoint, items)
        by_id = dict(result.rows)
        if len(by_id) != len(result.rows):
            raise ProtocolError(f"{endpoint}: duplicate row ids in embed response")
        ordered: list[list[float]] = []
        for rec in batch:
            if rec.id not in by_id:
                raise ProtocolError(
                    f"{endpoint}: embed response missing row for {rec.id!r}"
                )
            ordered.append(by_id[rec.id])
        return result.dims, ordered

    if max_in_flight > 1 and len(batches) > 1:
        with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
            results = list(pool.map(run_batch, batches))
    else:
        results = [run_batch(batch) for batch in batches]

    dims = results[0][0]
    rows: list[list[float]] = []
    for batch_dims, ordered in results:
        if batch_dims != dims:
            raise ProtocolError(
                f"{endpoint}: embedding dims changed between batches "
                f"({dims} then {batch_dims})"
            )
        rows.extend(ordered)

    data = np.asarray(rows, dtype=np.float64).astype(np.float32)
    return EmbeddingMatrix(ids=tuple(rec.id for rec in records), data=data)


def embed_manifest(
    endpoint: str,
    manifest: DatasetManifest,
    *,
    batch_size: int = 16,
    client: BackendClient | None = None,
    max_in_flight: int = 1,
) -> EmbeddingMatrix:
    """embed_remote over every record of a manifest, in record order."""
    return embed_remote(
        endpoint,
        manifest.records,
        root=manifest.root,
        batch_size=batch_size,
        client=client,
        max_in_flight=max_in_flight,
    )
