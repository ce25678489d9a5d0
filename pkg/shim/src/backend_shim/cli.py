"""Command line for the shim: `shim --mode identity --port 8080`."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import uvicorn

from .app import MODES, ShimConfig, create_app, load_adapter


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shim",
        description="Reference server for the /v1 backend wire protocol.",
    )
    parser.add_argument("--mode", choices=MODES, default="identity")
    parser.add_argument("--port", type=int, default=8080)
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument(
        "--capture-dir", type=Path, help="request capture directory (echo_capture)"
    )
    parser.add_argument(
        "--adapter",
        help="module:attribute of a callable(image_bytes, params) -> image_bytes "
        "(real_adapter)",
    )
    parser.add_argument(
        "--non-deterministic",
        action="store_true",
        help="advertise deterministic=false in health responses",
    )
    parser.add_argument("--model-id", help="override the advertised model id")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    adapter = None
    if args.mode == "real_adapter":
        if not args.adapter:
            print("error: real_adapter mode needs --adapter", file=sys.stderr)
            return 1
        adapter = load_adapter(args.adapter)
    try:
        config = ShimConfig(
            mode=args.mode,
            port=args.port,
            deterministic=not args.non_deterministic,
            capture_dir=args.capture_dir,
            adapter=adapter,
            model_id=args.model_id,
        )
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    uvicorn.run(create_app(config), host=args.host, port=config.port)
    return 0


if __name__ == "__main__":
    sys.exit(main())
