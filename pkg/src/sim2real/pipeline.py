"""Two-phase enhancement pipeline over remote backends.

Each image flows through the configured phases strictly in order
(diffusion-based enhancement first, then image-to-image distribution
matching), every phase consuming the previous phase's output.  Artifacts
are content-addressed under cache_dir/objects, with a phase-result index
under cache_dir/results, so re-running an unchanged configuration makes
zero backend calls.  Backends must not resize: a dimension change in any
response fails that image.  One image failing never blocks the others.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

from PIL import Image

from .dataset import DatasetManifest, ImageRecord
from .remote import (
    BackendClient,
    ImageResult,
    ProtocolError,
    RetryPolicy,
    TransportError,
    canonical_json,
)

PHASE_KINDS = ("diffusion_enhance", "im2im_translate")
TARGET_DOMAINS = ("kitti", "cs")

RUN_MANIFEST_SCHEMA = "run-manifest/1"


class ConfigError(Exception):
    """Pipeline configuration violates an invariant (order, params, policy)."""


class UnknownDomain(ConfigError):
    """Translation target is not one of the supported domains."""


class BackendUnavailable(Exception):
    """An endpoint failed its health check before the run started."""


class DimensionChanged(Exception):
    """A backend returned an image with different dimensions (resizing)."""


class PhaseError(Exception):
    """A phase failed for one image after retries were exhausted."""


def default_enhance_prompt() -> str:
    """The stock photorealism-enhancement prompt shipped with the toolkit."""
    text = (
        resources.files("sim2real.resources")
        .joinpath("enhance_prompt.txt")
        .read_text(encoding="utf-8")
    )
    return text.rstrip("\n")


@dataclass(frozen=True)
class PhaseSpec:
    """One pipeline phase: kind, backend endpoint, kind-specific params."""

    kind: str
    endpoint: str
    params: dict

    def __post_init__(self) -> None:
        if self.kind not in PHASE_KINDS:
            raise ConfigError(
                f"phase kind {self.kind!r} not one of {', '.join(PHASE_KINDS)}"
            )
        if not self.endpoint:
            raise ConfigError(f"{self.kind} phase needs an endpoint URL")
        if self.kind == "diffusion_enhance":
            prompt = self.params.get("prompt")
            if not isinstance(prompt, str) or not prompt:
                raise ConfigError("diffusion_enhance phase needs a non-empty prompt")
            seed = self.params.get("seed", 0)
            if not isinstance(seed, int):
                raise ConfigError("diffusion_enhance seed must be an integer")
        else:
            domain = self.params.get("target_domain")
            if domain not in TARGET_DOMAINS:
                raise UnknownDomain(
                    f"target_domain {domain!r} not one of {', '.join(TARGET_DOMAINS)}"
                )

    @staticmethod
    def diffusion(endpoint: str, prompt: str | None = None, seed: int = 0) -> "PhaseSpec":
        return PhaseSpec(
            kind="diffusion_enhance",
            endpoint=endpoint,
            params={"prompt": prompt if prompt is not None else default_enhance_prompt(),
                    "seed": seed},
        )

    @staticmethod
    def im2im(endpoint: str, target_domain: str) -> "PhaseSpec":
        return PhaseSpec(
            kind="im2im_translate",
            endpoint=endpoint,
            params={"target_domain": target_domain},
        )

    def canonical(self) -> bytes:
        return canonical_json(
            {"kind": self.kind, "endpoint": self.endpoint, "params": self.params}
        )


@dataclass(frozen=True)
class PipelineConfig:
    """Validated pipeline settings; resize_policy is fixed to "none"."""

    phases: tuple[PhaseSpec, ...]
    cache_dir: Path
    concurrency: int = 1
    retries: int = 3
    resize_policy: str = "none"

    def __post_init__(self) -> None:
        if not self.phases:
            raise ConfigError("pipeline needs at least one phase")
        if self.concurrency < 1:
            raise ConfigError("concurrency must be >= 1")
        if self.retries < 1:
            raise ConfigError("retries must be >= 1")
        if self.resize_policy != "none":
            raise ConfigError(
                f"resize_policy must be 'none', got {self.resize_policy!r}"
            )
        kinds = [p.kind for p in self.phases]
        if "diffusion_enhance" in kinds and "im2im_translate" in kinds:
            if max(
                i for i, k in enumerate(kinds) if k == "diffusion_enhance"
            ) > min(i for i, k in enumerate(kinds) if k == "im2im_translate"):
                raise ConfigError(
                    "diffusion_enhance must precede im2im_translate"
                )

    def content_hash(self) -> str:
        """Hash of the run-defining settings (location-independent)."""
        doc = {
            "phases": [
                {"kind": p.kind, "endpoint": p.endpoint, "params": p.params}
                for p in self.phases
            ],
            "concurrency": self.concurrency,
            "retries": self.retries,
            "resize_policy": self.resize_policy,
        }
        return hashlib.sha256(canonical_json(doc)).hexdigest()


def cache_key(input_bytes: bytes, phase: PhaseSpec) -> str:
    """Digest over the input bytes concatenated with the phase serialization."""
    return hashlib.sha256(input_bytes + phase.canonical()).hexdigest()


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class ArtifactCache:
    """Content-addressed object store plus a phase-result index."""

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)
        self.objects = self.root / "objects"
        self.results = self.root / "results"
        self.objects.mkdir(parents=True, exist_ok=True)
        self.results.mkdir(parents=True, exist_ok=True)

    def store(self, data: bytes) -> str:
        digest = _sha256(data)
        path = self.objects / digest
        if not path.exists():
            _atomic_write(path, data)
        return digest

    def has_object(self, digest: str) -> bool:
        return (self.objects / digest).is_file()

    def read(self, digest: str) -> bytes:
        return (self.objects / digest).read_bytes()

    def lookup(self, key: str) -> str | None:
        path = self.results / key
        if not path.is_file():
            return None
        return path.read_text(encoding="utf-8").strip()

    def record(self, key: str, output_hash: str) -> None:
        _atomic_write(self.results / key, output_hash.encode("utf-8"))


def _image_size(data: bytes) -> tuple[int, int]:
    with Image.open(io.BytesIO(data)) as img:
        return img.size


def _verify_dimensions(input_bytes: bytes, result: ImageResult, context: str) -> None:
    in_size = _image_size(input_bytes)
    try:
        out_size = _image_size(result.image)
    except Exception as exc:
        raise ProtocolError(f"{context}: response image does not decode: {exc}") from exc
    if out_size != in_size:
        raise DimensionChanged(
            f"{context}: backend resized {in_size[0]}x{in_size[1]} to "
            f"{out_size[0]}x{out_size[1]}"
        )


def _to_png(result: ImageResult) -> bytes:
    """Backend bytes verbatim when already PNG, else a lossless re-encode."""
    if result.format.lower() == "png":
        return result.image
    with Image.open(io.BytesIO(result.image)) as img:
        buf = io.BytesIO()
        img.save(buf, format="PNG")
        return buf.getvalue()


def enhance_phase(
    endpoint: str,
    image: bytes,
    prompt: str,
    seed: int,
    *,
    client: BackendClient | None = None,
) -> bytes:
    """Run one diffusion-enhancement call; backend bytes returned unmodified."""
    if not prompt:
        raise ConfigError("prompt must be non-empty")
    client = client or BackendClient()
    result = client.enhance(endpoint, image, prompt, seed)
    _verify_dimensions(image, result, f"enhance via {endpoint}")
    return result.image


def translate_phase(
    endpoint: str,
    image: bytes,
    target_domain: str,
    *,
    client: BackendClient | None = None,
) -> bytes:
    """Run one distribution-matching call; domain is validated before any request."""
    if target_domain not in TARGET_DOMAINS:
        raise UnknownDomain(
            f"target_domain {target_domain!r} not one of {', '.join(TARGET_DOMAINS)}"
        )
    client = client or BackendClient()
    result = client.translate(endpoint, image, "png", target_domain)
    _verify_dimensions(image, result, f"translate via {endpoint}")
    return result.image


@dataclass
class PhaseEntry:
    """One (image, phase) execution record."""

    image_id: str
    phase_index: int
    kind: str
    endpoint: str
    input_hash: str
    output_hash: str | None
    duration_ms: float
    attempts: int
    cached: bool
    status: str = "ok"
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "phase_index": self.phase_index,
            "kind": self.kind,
            "endpoint": self.endpoint,
            "input_hash": self.input_hash,
            "output_hash": self.output_hash,
            "duration_ms": self.duration_ms,
            "attempts": self.attempts,
            "cached": self.cached,
            "status": self.status,
            "error": self.error,
        }


@dataclass
class RunManifest:
    """Content-addressed record of every phase applied to every image."""

    config_hash: str
    dataset_name: str
    started: str
    finished: str
    endpoints: dict[str, dict]
    entries: list[PhaseEntry] = field(default_factory=list)
    failed_images: list[str] = field(default_factory=list)
    run_dir: Path | None = None

    @property
    def all_cached(self) -> bool:
        return bool(self.entries) and all(e.cached for e in self.entries)

    @property
    def backend_calls(self) -> int:
        return sum(e.attempts for e in self.entries)

    def to_dict(self) -> dict:
        return {
            "schema": RUN_MANIFEST_SCHEMA,
            "config_hash": self.config_hash,
            "dataset": self.dataset_name,
            "started": self.started,
            "finished": self.finished,
            "endpoints": self.endpoints,
            "entries": [e.to_dict() for e in self.entries],
            "failed_images": list(self.failed_images),
            "summary": {
                "n_entries": len(self.entries),
                "n_failed_images": len(self.failed_images),
                "all_cached": self.all_cached,
                "backend_calls": self.backend_calls,
            },
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="microseconds")


def _safe_name(image_id: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in image_id)


def _process_image(
    record: ImageRecord,
    dataset: DatasetManifest,
    config: PipelineConfig,
    cache: ArtifactCache,
    client: BackendClient,
) -> tuple[list[PhaseEntry], bytes | None]:
    """All phases for one image; returns entries and the final artifact."""
    try:
        current = dataset.image_path(record).read_bytes()
    except OSError as exc:
        entry = PhaseEntry(
            image_id=record.id,
            phase_index=0,
            kind=config.phases[0].kind,
            endpoint=config.phases[0].endpoint,
            input_hash=_sha256(b""),
            output_hash=None,
            duration_ms=0.0,
            attempts=0,
            cached=False,
            status="failed",
            error=f"unreadable input: {exc}",
        )
        return [entry], None
    current_hash = _sha256(current)
    entries: list[PhaseEntry] = []
    for index, phase in enumerate(config.phases):
        key = cache_key(current, phase)
        start = time.perf_counter()
        cached_hash = cache.lookup(key)
        if cached_hash is not None and cache.has_object(cached_hash):
            output = cache.read(cached_hash)
            output_hash = cached_hash
            attempts = 0
            cached = True
        else:
            try:
                if phase.kind == "diffusion_enhance":
                    result = client.enhance(
                        phase.endpoint,
                        current,
                        phase.params["prompt"],
                        phase.params["seed"],
                    )
                else:
                    result = client.translate(
                        phase.endpoint, current, "png", phase.params["target_domain"]
                    )
                _verify_dimensions(
                    current, result, f"{phase.kind} for {record.id!r}"
                )
                output = _to_png(result)
            except (TransportError, ProtocolError, DimensionChanged, OSError) as exc:
                entries.append(
                    PhaseEntry(
                        image_id=record.id,
                        phase_index=index,
                        kind=phase.kind,
                        endpoint=phase.endpoint,
                        input_hash=current_hash,
                        output_hash=None,
                        duration_ms=(time.perf_counter() - start) * 1000.0,
                        attempts=getattr(exc, "attempts", config.retries),
                        cached=False,
                        status="failed",
                        error=f"{type(exc).__name__}: {exc}",
                    )
                )
                return entries, None
            output_hash = cache.store(output)
            cache.record(key, output_hash)
            attempts = result.attempts
            cached = False
        entries.append(
            PhaseEntry(
                image_id=record.id,
                phase_index=index,
                kind=phase.kind,
                endpoint=phase.endpoint,
                input_hash=current_hash,
                output_hash=output_hash,
                duration_ms=(time.perf_counter() - start) * 1000.0,
                attempts=attempts,
                cached=cached,
            )
        )
        current = output
        current_hash = output_hash
    return entries, current


def run_pipeline(
    config: PipelineConfig,
    dataset: DatasetManifest,
    *,
    client: BackendClient | None = None,
) -> RunManifest:
    """Execute every phase over every image with bounded parallelism.

    All endpoints are health-checked up front (BackendUnavailable on
    failure).  Phase failures are isolated per image: the image is marked
    failed and the run continues.  The returned manifest is also written
    to cache_dir/runs/<timestamp>-<config_hash>/manifest.json, with final
    artifacts materialized under outputs/.
    """
    if client is None:
        client = BackendClient(retry=RetryPolicy(attempts=config.retries))

    endpoints: dict[str, dict] = {}
    for phase in config.phases:
        if phase.endpoint in endpoints:
            continue
        try:
            status = client.health(phase.endpoint)
        except (TransportError, ProtocolError) as exc:
            raise BackendUnavailable(f"{phase.endpoint}: {exc}") from exc
        if not status.ok:
            raise BackendUnavailable(f"{phase.endpoint}: backend reports not ok")
        endpoints[phase.endpoint] = {
            "model_id": status.model_id,
            "deterministic": status.deterministic,
        }

    cache = ArtifactCache(config.cache_dir)
    started = _utc_now()

    if config.concurrency > 1 and len(dataset.records) > 1:
        with ThreadPoolExecutor(max_workers=config.concurrency) as pool:
            results = list(
                pool.map(
                    lambda rec: _process_image(rec, dataset, config, cache, client),
                    dataset.records,
                )
            )
    else:
        results = [
            _process_image(rec, dataset, config, cache, client)
            for rec in dataset.records
        ]

    manifest = RunManifest(
        config_hash=config.content_hash(),
        dataset_name=dataset.name,
        started=started,
        finished=_utc_now(),
        endpoints=endpoints,
    )
    finals: list[tuple[ImageRecord, bytes]] = []
    for record, (entries, final) in zip(dataset.records, results):
        manifest.entries.extend(entries)
        if final is None:
            manifest.failed_images.append(record.id)
        else:
            finals.append((record, final))

    run_dir = _new_run_dir(config)
    outputs = run_dir / "outputs"
    outputs.mkdir(parents=True, exist_ok=True)
    for record, final in finals:
        _atomic_write(outputs / f"{_safe_name(record.id)}.png", final)
    manifest.run_dir = run_dir
    manifest.save(run_dir / "manifest.json")
    return manifest


def _new_run_dir(config: PipelineConfig) -> Path:
    runs = Path(config.cache_dir) / "runs"
    runs.mkdir(parents=True, exist_ok=True)
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S.%fZ")
    base = f"{stamp}-{config.content_hash()[:12]}"
    candidate = runs / base
    counter = 1
    while candidate.exists():
        counter += 1
        candidate = runs / f"{base}-{counter}"
    candidate.mkdir()
    return candidate
