"""Dataset manifests, segmentation label maps, detection annotations.

Manifests are JSON documents cataloguing images plus their annotation kind
(segmentation / detection / none) and category set.  Segmentation ground
truth is ingested as 8-bit single-channel index PNGs; detections from a
line-oriented text format.  Category mappings (merges such as
tree -> vegetation) are user-editable JSON data, with the stock
VKITTI2 -> Cityscapes table shipped as a package resource.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np
from PIL import Image

ANNOTATION_KINDS = ("segmentation", "detection", "none")

DEFAULT_IGNORE_INDEX = 255


class DatasetError(Exception):
    """Base class for dataset loading/validation failures."""


class ParseError(DatasetError):
    """Input file is malformed (bad JSON, bad line syntax, wrong types)."""


class ValidationError(DatasetError):
    """Input parsed but violates a manifest/annotation invariant."""


class MappingError(DatasetError):
    """A category mapping is not total over the source category set."""


@dataclass(frozen=True)
class ImageRecord:
    """One catalogued image: id, path relative to the manifest root, size."""

    id: str
    path: str
    width: int
    height: int
    source_tag: str = ""


@dataclass(frozen=True)
class DatasetManifest:
    """Validated image catalogue; record order is canonical downstream.

    ``root`` is resolved against the manifest file location at load time.
    ``normalized_coords`` flags detection files whose box coordinates are
    fractions of image size rather than pixels.
    """

    name: str
    root: Path
    records: tuple[ImageRecord, ...]
    annotation_kind: str
    categories: tuple[str, ...] = ()
    normalized_coords: bool = False
    _by_id: dict[str, ImageRecord] = field(
        init=False, repr=False, compare=False, default_factory=dict
    )

    def __post_init__(self) -> None:
        object.__setattr__(self, "_by_id", {r.id: r for r in self.records})

    def record_by_id(self, image_id: str) -> ImageRecord:
        try:
            return self._by_id[image_id]
        except KeyError:
            raise ValidationError(f"unknown image id {image_id!r}") from None

    def has_image(self, image_id: str) -> bool:
        return image_id in self._by_id

    def image_path(self, record: ImageRecord) -> Path:
        return self.root / record.path


@dataclass(frozen=True)
class SegLabelMap:
    """Per-pixel category indices with a reserved ignore index.

    ``categories`` names the index space (index i -> categories[i]) when
    known; pixels equal to ``ignore_index`` are excluded from evaluation.
    """

    labels: np.ndarray
    ignore_index: int = DEFAULT_IGNORE_INDEX
    categories: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if self.labels.ndim != 2:
            raise ValidationError("label map must be a 2-D grid")
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise ValidationError("label map must have an integer dtype")
        if self.categories is not None:
            k = len(self.categories)
            if self.ignore_index < k:
                raise ValidationError(
                    f"ignore_index {self.ignore_index} collides with the "
                    f"{k} category indices"
                )
            bad = (self.labels >= k) & (self.labels != self.ignore_index)
            if bad.any():
                y, x = np.argwhere(bad)[0]
                raise ValidationError(
                    f"label {int(self.labels[y, x])} at pixel ({int(x)}, {int(y)}) "
                    f"outside the {k}-category index space"
                )

    @property
    def width(self) -> int:
        return int(self.labels.shape[1])

    @property
    def height(self) -> int:
        return int(self.labels.shape[0])


@dataclass(frozen=True)
class CategoryMapping:
    """Ordered relabeling rules: source name -> target name or IGNORE.

    A rule with ``target=None`` sends the source category to the ignore
    index.  The mapping must be total over whatever source category set it
    is applied to.
    """

    rules: tuple[tuple[str, str | None], ...]

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for source, _ in self.rules:
            if source in seen:
                raise MappingError(f"duplicate rule for source category {source!r}")
            seen.add(source)

    def target_for(self, source: str) -> str | None:
        for rule_source, target in self.rules:
            if rule_source == source:
                return target
        raise MappingError(f"no rule for source category {source!r}")

    def target_categories(self, source_categories: tuple[str, ...]) -> tuple[str, ...]:
        """Target names in order of first appearance over the source set."""
        out: list[str] = []
        for source in source_categories:
            target = self.target_for(source)
            if target is not None and target not in out:
                out.append(target)
        return tuple(out)


@dataclass(frozen=True)
class DetectionAnnotation:
    """One ground-truth or predicted box in pixel coordinates.

    Carries raw parsed values; validate_detections establishes the box
    invariants (non-degenerate, in bounds, known image and class).
    ``confidence`` is None for ground truth.
    """

    image_id: str
    class_index: int
    box: tuple[float, float, float, float]
    confidence: float | None = None


@dataclass
class DetectionValidationReport:
    """Outcome of validating raw detection rows against a manifest.

    ``accepted`` holds the cleaned annotations (clamped where needed);
    the remaining lists describe what was fixed up or dropped.
    """

    accepted: list[DetectionAnnotation] = field(default_factory=list)
    clamped: list[str] = field(default_factory=list)
    unknown_images: list[str] = field(default_factory=list)
    bad_class: list[str] = field(default_factory=list)
    degenerate: list[str] = field(default_factory=list)

    @property
    def clean(self) -> bool:
        return not (
            self.clamped or self.unknown_images or self.bad_class or self.degenerate
        )


def load_manifest(path: str | Path) -> DatasetManifest:
    """Load and validate a JSON dataset manifest.

    Raises ParseError for malformed documents and ValidationError for
    duplicate ids, missing image files, or bad dimensions.  The manifest
    root is resolved relative to the manifest file's directory when not
    absolute.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ParseError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"manifest {path} is not valid JSON: {exc}") from exc
    return manifest_from_dict(doc, base_dir=path.parent)


def manifest_from_dict(doc: dict, base_dir: Path | None = None) -> DatasetManifest:
    """Build a manifest from a parsed document; see load_manifest.

    With ``base_dir=None`` the record paths are not checked against the
    filesystem (useful for synthesizing manifests in memory).
    """
    if not isinstance(doc, dict):
        raise ParseError("manifest must be a JSON object")
    for key in ("name", "root", "annotation_kind", "records"):
        if key not in doc:
            raise ParseError(f"manifest missing required key {key!r}")

    kind = doc["annotation_kind"]
    if kind not in ANNOTATION_KINDS:
        raise ParseError(
            f"annotation_kind {kind!r} not one of {', '.join(ANNOTATION_KINDS)}"
        )

    root = Path(doc["root"])
    if base_dir is not None and not root.is_absolute():
        root = base_dir / root

    categories = tuple(str(c) for c in doc.get("categories", []))
    if kind != "none" and not categories:
        raise ValidationError(
            f"annotation_kind={kind} requires a non-empty category list"
        )
    if len(set(categories)) != len(categories):
        raise ValidationError("duplicate category names in manifest")

    raw_records = doc["records"]
    if not isinstance(raw_records, list) or not raw_records:
        raise ValidationError("manifest must contain at least one record")

    records: list[ImageRecord] = []
    seen_ids: set[str] = set()
    for i, raw in enumerate(raw_records):
        if not isinstance(raw, dict):
            raise ParseError(f"record #{i} is not an object")
        try:
            rec = ImageRecord(
                id=str(raw["id"]),
                path=str(raw["path"]),
                width=int(raw["width"]),
                height=int(raw["height"]),
                source_tag=str(raw.get("source_tag", "")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"record #{i} is malformed: {exc}") from exc
        if rec.id in seen_ids:
            raise ValidationError(f"duplicate record id {rec.id!r}")
        seen_ids.add(rec.id)
        if rec.width <= 0 or rec.height <= 0:
            raise ValidationError(
                f"record {rec.id!r} has non-positive dimensions "
                f"{rec.width}x{rec.height}"
            )
        if base_dir is not None and not (root / rec.path).is_file():
            raise ValidationError(
                f"record {rec.id!r} path {rec.path!r} does not resolve under "
                f"manifest root {root}"
            )
        records.append(rec)

    return DatasetManifest(
        name=str(doc["name"]),
        root=root,
        records=tuple(records),
        annotation_kind=kind,
        categories=categories,
        normalized_coords=bool(doc.get("normalized_coords", False)),
    )


def manifest_to_dict(manifest: DatasetManifest) -> dict:
    doc = {
        "name": manifest.name,
        "root": str(manifest.root),
        "annotation_kind": manifest.annotation_kind,
        "categories": list(manifest.categories),
        "records": [
            {
                "id": r.id,
                "path": r.path,
                "width": r.width,
                "height": r.height,
                "source_tag": r.source_tag,
            }
            for r in manifest.records
        ],
    }
    if manifest.normalized_coords:
        doc["normalized_coords"] = True
    return doc


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(manifest_to_dict(manifest), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )


def load_seg_map(
    path: str | Path,
    *,
    ignore_index: int = DEFAULT_IGNORE_INDEX,
    categories: tuple[str, ...] | None = None,
    expected_size: tuple[int, int] | None = None,
) -> SegLabelMap:
    """Load an 8-bit single-channel index PNG as a label map.

    ``expected_size`` is (width, height) from the paired image record;
    a mismatch raises ValidationError.  Colour-coded maps must be decoded
    to index maps upstream; only single-channel images are accepted.
    """
    path = Path(path)
    try:
        with Image.open(path) as img:
            if img.mode not in ("L", "P", "I", "I;16"):
                raise ValidationError(
                    f"{path} has mode {img.mode}; expected a single-channel "
                    "index image"
                )
            labels = np.asarray(img, dtype=np.int64)
    except OSError as exc:
        raise ParseError(f"cannot decode label map {path}: {exc}") from exc
    if expected_size is not None:
        w, h = expected_size
        if labels.shape != (h, w):
            raise ValidationError(
                f"label map {path} is {labels.shape[1]}x{labels.shape[0]}, "
                f"expected {w}x{h}"
            )
    return SegLabelMap(labels=labels, ignore_index=ignore_index, categories=categories)


def save_seg_map(seg: SegLabelMap, path: str | Path) -> None:
    if seg.labels.min() < 0 or seg.labels.max() > 255:
        raise ValidationError("label indices outside 8-bit range")
    Image.fromarray(seg.labels.astype(np.uint8), mode="L").save(path, format="PNG")


def load_category_mapping(path: str | Path) -> CategoryMapping:
    """Load relabeling rules from JSON: {"rules": [{"source", "target"?}]}.

    A rule without "target" (or with "target": null) ignores the source
    category.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot load category mapping {path}: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("rules"), list):
        raise ParseError(f"mapping {path} must be an object with a 'rules' list")
    rules: list[tuple[str, str | None]] = []
    for i, raw in enumerate(doc["rules"]):
        if not isinstance(raw, dict) or "source" not in raw:
            raise ParseError(f"mapping rule #{i} must be an object with 'source'")
        target = raw.get("target")
        rules.append((str(raw["source"]), None if target is None else str(target)))
    return CategoryMapping(rules=tuple(rules))


def default_vkitti2_mapping() -> CategoryMapping:
    """Stock VKITTI2 -> Cityscapes-compatible merge table (11 evaluated classes)."""
    text = (
        resources.files("sim2real.resources")
        .joinpath("vkitti2_to_cityscapes.json")
        .read_text(encoding="utf-8")
    )
    doc = json.loads(text)
    return CategoryMapping(
        rules=tuple((r["source"], r.get("target")) for r in doc["rules"])
    )


def apply_category_mapping(seg: SegLabelMap, mapping: CategoryMapping) -> SegLabelMap:
    """Relabel every pixel per the mapping rules.

    The label map must carry its source category names.  Ignored source
    categories become ``ignore_index``; the result's category list is the
    mapping's target set.  Raises MappingError if any source category has
    no rule.
    """
    if seg.categories is None:
        raise MappingError("label map has no category names to map from")
    targets = mapping.target_categories(seg.categories)
    target_index = {name: i for i, name in enumerate(targets)}
    if seg.ignore_index < len(targets):
        raise MappingError(
            f"ignore_index {seg.ignore_index} collides with the mapped "
            f"{len(targets)}-category index space"
        )

    lookup = np.full(
        max(len(seg.categories), seg.ignore_index) + 1,
        seg.ignore_index,
        dtype=np.int64,
    )
    for i, source in enumerate(seg.categories):
        target = mapping.target_for(source)
        lookup[i] = seg.ignore_index if target is None else target_index[target]
    lookup[seg.ignore_index] = seg.ignore_index
    return SegLabelMap(
        labels=lookup[seg.labels],
        ignore_index=seg.ignore_index,
        categories=targets,
    )


def load_detection_file(
    path: str | Path,
    *,
    require_confidence: bool = False,
) -> list[DetectionAnnotation]:
    """Parse line-oriented detections: image_id class x_min y_min x_max y_max [conf].

    '#' starts a comment; blank lines are skipped.  Rows are returned raw
    (possibly degenerate or out of bounds); validate_detections cleans them.
    """
    path = Path(path)
    rows: list[DetectionAnnotation] = []
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read detection file {path}: {exc}") from exc
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (6, 7):
            raise ParseError(
                f"{path}:{lineno}: expected 6 or 7 fields, got {len(parts)}"
            )
        try:
            class_index = int(parts[1])
            x_min, y_min, x_max, y_max = (float(v) for v in parts[2:6])
            confidence = float(parts[6]) if len(parts) == 7 else None
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from exc
        if require_confidence and confidence is None:
            raise ParseError(f"{path}:{lineno}: prediction line missing confidence")
        if confidence is not None and not 0.0 <= confidence <= 1.0:
            raise ParseError(
                f"{path}:{lineno}: confidence {confidence} outside [0, 1]"
            )
        rows.append(
            DetectionAnnotation(
                image_id=parts[0],
                class_index=class_index,
                box=(x_min, y_min, x_max, y_max),
                confidence=confidence,
            )
        )
    return rows


def validate_detections(
    manifest: DatasetManifest,
    annotations: list[DetectionAnnotation],
) -> DetectionValidationReport:
    """Clamp out-of-bounds boxes, drop degenerate ones, flag unknown images.

    Report-style: never raises on bad rows, only on misuse (manifest is not
    detection-kind).  Boxes from normalized-coordinate files are scaled to
    pixels first.
    """
    if manifest.annotation_kind != "detection":
        raise ValidationError(
            f"manifest {manifest.name!r} is {manifest.annotation_kind}-kind, "
            "not detection"
        )
    k = len(manifest.categories)
    report = DetectionValidationReport()
    for ann in annotations:
        if not manifest.has_image(ann.image_id):
            report.unknown_images.append(f"image {ann.image_id!r} not in manifest")
            continue
        if not 0 <= ann.class_index < k:
            report.bad_class.append(
                f"image {ann.image_id!r}: class index {ann.class_index} outside "
                f"the {k}-category set"
            )
            continue
        rec = manifest.record_by_id(ann.image_id)
        x_min, y_min, x_max, y_max = ann.box
        if manifest.normalized_coords:
            x_min, x_max = x_min * rec.width, x_max * rec.width
            y_min, y_max = y_min * rec.height, y_max * rec.height
        clamped = (
            min(max(x_min, 0.0), float(rec.width)),
            min(max(y_min, 0.0), float(rec.height)),
            min(max(x_max, 0.0), float(rec.width)),
            min(max(y_max, 0.0), float(rec.height)),
        )
        if clamped != (x_min, y_min, x_max, y_max):
            report.clamped.append(
                f"image {ann.image_id!r}: box ({x_min}, {y_min}, {x_max}, {y_max}) "
                f"clamped to {clamped}"
            )
        cx_min, cy_min, cx_max, cy_max = clamped
        if not (cx_min < cx_max and cy_min < cy_max):
            report.degenerate.append(
                f"image {ann.image_id!r}: degenerate box "
                f"({x_min}, {y_min}, {x_max}, {y_max}) dropped"
            )
            continue
        report.accepted.append(
            DetectionAnnotation(
                image_id=ann.image_id,
                class_index=ann.class_index,
                box=clamped,
                confidence=ann.confidence,
            )
        )
    return report


def remap_categories(
    manifest: DatasetManifest, mapping: CategoryMapping
) -> DatasetManifest:
    """Manifest with categories replaced by the mapping's target set."""
    return replace(manifest, categories=mapping.target_categories(manifest.categories))
