"""Command-line entry point: run, embed, cmmd, eval-seg, eval-det, report.

Exit codes: 0 success, 1 fatal error (bad input, unreachable backend),
2 partial failure (the run completed but some images failed).  All
subcommands except run/embed work offline from files.  The cache
location resolves as flag > SIM2REAL_CACHE_DIR > config file.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import SCHEMA_VERSION, __version__
from . import cmmd as cmmd_mod
from . import dataset as ds
from . import deteval, embeddings, pipeline, remote, report as report_mod, segeval

_FATAL_ERRORS = (
    remote.TransportError,
    remote.ProtocolError,
    ds.DatasetError,
    embeddings.FormatError,
    embeddings.DegenerateRowError,
    cmmd_mod.DimensionMismatch,
    cmmd_mod.InsufficientSamples,
    segeval.DimensionMismatch,
    segeval.LabelOutOfRange,
    segeval.NoDefinedClasses,
    deteval.DegenerateBox,
    deteval.NoGroundTruth,
    deteval.NoDefinedClasses,
    pipeline.ConfigError,
    pipeline.BackendUnavailable,
    report_mod.ConflictingCell,
    report_mod.ReportInputError,
    ValueError,
    OSError,
)


def _emit(doc: dict, out: str | None) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    sys.stdout.write(text)
    if out:
        Path(out).write_text(text, encoding="utf-8")


def _stamp(doc: dict, args: argparse.Namespace) -> dict:
    if getattr(args, "variant", None):
        doc["variant"] = args.variant
    if getattr(args, "domain", None):
        doc["domain"] = args.domain
    return doc


def _load_run_config(args: argparse.Namespace) -> pipeline.PipelineConfig:
    path = Path(args.config)
    try:
        doc = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise pipeline.ConfigError(f"{path}: {exc}") from exc

    phases = []
    for i, raw in enumerate(doc.get("phases", [])):
        kind = raw.get("kind")
        endpoint = raw.get("endpoint", "")
        if kind == "diffusion_enhance":
            prompt = raw.get("prompt")
            if args.prompt_file:
                prompt = Path(args.prompt_file).read_text(encoding="utf-8").rstrip("\n")
            elif prompt is None and raw.get("prompt_file"):
                prompt = Path(raw["prompt_file"]).read_text(encoding="utf-8").rstrip("\n")
            phases.append(
                pipeline.PhaseSpec.diffusion(
                    endpoint, prompt=prompt, seed=int(raw.get("seed", 0))
                )
            )
        elif kind == "im2im_translate":
            phases.append(pipeline.PhaseSpec.im2im(endpoint, raw.get("target_domain")))
        else:
            raise pipeline.ConfigError(f"{path}: phase #{i} has unknown kind {kind!r}")

    cache_dir = (
        args.cache_dir
        or os.environ.get("SIM2REAL_CACHE_DIR")
        or doc.get("cache_dir")
        or "sim2real-cache"
    )
    return pipeline.PipelineConfig(
        phases=tuple(phases),
        cache_dir=Path(cache_dir),
        concurrency=int(args.concurrency or doc.get("concurrency", 1)),
        retries=int(args.retries or doc.get("retries", 3)),
        resize_policy=str(doc.get("resize_policy", "none")),
    )


def cmd_run(args: argparse.Namespace) -> int:
    config = _load_run_config(args)
    dataset = ds.load_manifest(args.manifest)
    manifest = pipeline.run_pipeline(config, dataset)
    print(manifest.run_dir / "manifest.json")
    if manifest.failed_images:
        for image_id in manifest.failed_images:
            print(f"failed: {image_id}", file=sys.stderr)
        return 2
    return 0


def cmd_embed(args: argparse.Namespace) -> int:
    dataset = ds.load_manifest(args.manifest)
    matrix = embeddings.embed_manifest(
        args.endpoint,
        dataset,
        batch_size=args.batch_size,
        max_in_flight=args.max_in_flight,
    )
    embeddings.write_embeddings(matrix, args.out)
    _emit({"out": str(args.out), "n": matrix.n, "dims": matrix.dims}, None)
    return 0


def cmd_cmmd(args: argparse.Namespace) -> int:
    ref = embeddings.normalize_rows(embeddings.read_embeddings(args.ref))
    gen = embeddings.normalize_rows(embeddings.read_embeddings(args.gen))
    config = cmmd_mod.CmmdConfig(
        sigma=args.sigma,
        scale=args.scale,
        estimator=cmmd_mod.Estimator(args.estimator),
        block=args.block,
    )
    result = cmmd_mod.cmmd(ref, gen, config)
    _emit(_stamp(result.to_dict(), args), args.out)
    return 0


def cmd_eval_seg(args: argparse.Namespace) -> int:
    manifest = ds.load_manifest(args.manifest)
    if manifest.annotation_kind != "segmentation":
        raise ds.ValidationError(
            f"manifest {manifest.name!r} is {manifest.annotation_kind}-kind, "
            "not segmentation"
        )
    mapping = None
    if args.mapping == "default":
        mapping = ds.default_vkitti2_mapping()
    elif args.mapping:
        mapping = ds.load_category_mapping(args.mapping)
    categories = (
        mapping.target_categories(manifest.categories) if mapping
        else manifest.categories
    )

    cm = segeval.ConfusionMatrix(k=len(categories))
    gt_dir, pred_dir = Path(args.gt_dir), Path(args.pred_dir)
    for record in manifest.records:
        size = (record.width, record.height)
        gt = ds.load_seg_map(
            gt_dir / f"{record.id}.png",
            ignore_index=args.ignore_index,
            categories=manifest.categories,
            expected_size=size,
        )
        if mapping:
            gt = ds.apply_category_mapping(gt, mapping)
        pred = ds.load_seg_map(
            pred_dir / f"{record.id}.png",
            ignore_index=args.ignore_index,
            categories=categories,
            expected_size=size,
        )
        segeval.accumulate(cm, gt, pred)

    ious = segeval.iou_per_class(cm)
    doc = {
        "per_class_iou": {name: iou for name, iou in zip(categories, ious)},
        "miou": segeval.miou(cm),
        "pixels_evaluated": cm.pixels_evaluated,
        "pixels_ignored": cm.pixels_ignored,
        "void_pred_policy": "void predictions count against the class union",
    }
    _emit(_stamp(doc, args), args.out)
    return 0


def cmd_eval_det(args: argparse.Namespace) -> int:
    manifest = ds.load_manifest(args.manifest)
    gt_report = ds.validate_detections(manifest, ds.load_detection_file(args.gt))
    pred_rows = ds.load_detection_file(args.pred, require_confidence=True)
    pred_report = ds.validate_detections(manifest, pred_rows)
    for line in (
        gt_report.clamped + gt_report.unknown_images + gt_report.bad_class
        + gt_report.degenerate + pred_report.clamped + pred_report.unknown_images
        + pred_report.bad_class + pred_report.degenerate
    ):
        print(f"warning: {line}", file=sys.stderr)

    dets = [
        deteval.Detection(
            image_id=a.image_id,
            class_index=a.class_index,
            confidence=a.confidence if a.confidence is not None else 0.0,
            box=a.box,
        )
        for a in pred_report.accepted
    ]
    result = deteval.map50(
        dets, gt_report.accepted, manifest, threshold=args.iou_threshold
    )
    _emit(_stamp(result.to_dict(), args), args.out)
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    cells = report_mod.load_cells(args.results)
    doc = report_mod.build_report(cells, dataset=args.dataset)
    table = report_mod.render_table(doc)
    sys.stdout.write(table)
    if args.json:
        Path(args.json).write_text(
            json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    if args.table:
        Path(args.table).write_text(table, encoding="utf-8")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sim2real",
        description="Photorealism-enhancement pipeline driver and "
        "sim2real appearance-gap metrics.",
    )
    parser.add_argument(
        "--version",
        action="version",
        version=f"sim2real-toolkit {__version__} (schemas v{SCHEMA_VERSION})",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="execute the enhancement pipeline")
    p.add_argument("--config", required=True, help="TOML pipeline configuration")
    p.add_argument("--manifest", required=True, help="dataset manifest JSON")
    p.add_argument("--cache-dir", help="override the cache directory")
    p.add_argument("--prompt-file", help="override every diffusion prompt")
    p.add_argument("--concurrency", type=int, help="max images in flight")
    p.add_argument("--retries", type=int, help="max attempts per request")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("embed", help="fetch embeddings from a /v1/embed endpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--endpoint", required=True)
    p.add_argument("--out", required=True, help="output .semb file")
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--max-in-flight", type=int, default=1)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("cmmd", help="CMMD between two embedding files")
    p.add_argument("--ref", required=True, help="reference .semb file")
    p.add_argument("--gen", required=True, help="generated .semb file")
    p.add_argument("--sigma", type=float, default=10.0)
    p.add_argument("--scale", type=float, default=1000.0)
    p.add_argument("--estimator", choices=["biased", "unbiased"], default="biased")
    p.add_argument("--block", type=int, default=1024)
    p.add_argument("--variant", choices=report_mod.VARIANTS)
    p.add_argument("--domain")
    p.add_argument("--out")
    p.set_defaults(func=cmd_cmmd)

    p = sub.add_parser("eval-seg", help="mIoU of predictions vs ground truth")
    p.add_argument("--manifest", required=True)
    p.add_argument("--gt-dir", required=True, help="ground-truth index PNGs")
    p.add_argument("--pred-dir", required=True, help="prediction index PNGs")
    p.add_argument(
        "--mapping",
        help="category mapping JSON applied to ground truth; "
        "'default' = stock VKITTI2 table",
    )
    p.add_argument("--ignore-index", type=int, default=ds.DEFAULT_IGNORE_INDEX)
    p.add_argument("--variant", choices=report_mod.VARIANTS)
    p.add_argument("--domain")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval_seg)

    p = sub.add_parser("eval-det", help="mAP@50 of predictions vs ground truth")
    p.add_argument("--manifest", required=True)
    p.add_argument("--gt", required=True, help="ground-truth detection file")
    p.add_argument("--pred", required=True, help="prediction detection file")
    p.add_argument("--iou-threshold", type=float, default=0.5)
    p.add_argument("--variant", choices=report_mod.VARIANTS)
    p.add_argument("--domain")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval_det)

    p = sub.add_parser("report", help="cross-variant comparison table")
    p.add_argument("results", nargs="+", help="stamped metric result JSON files")
    p.add_argument("--dataset", help="dataset label for the report metadata")
    p.add_argument("--json", help="write the report document here")
    p.add_argument("--table", help="write the text table here")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except _FATAL_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
