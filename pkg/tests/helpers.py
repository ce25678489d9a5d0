from __future__ import annotations

import io
import json
from pathlib import Path

import numpy as np
from PIL import Image


def png_bytes(width: int = 8, height: int = 8, seed: int = 0) -> bytes:
    rng = np.random.default_rng(seed)
    pixels = rng.integers(0, 256, size=(height, width, 3), dtype=np.uint8)
    buf = io.BytesIO()
    Image.fromarray(pixels, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def write_dataset(
    root: Path,
    n_images: int = 3,
    annotation_kind: str = "none",
    categories: tuple[str, ...] = (),
    size: tuple[int, int] = (8, 8),
) -> Path:
    """Materialize PNGs plus a manifest; returns the manifest path."""
    images = root / "images"
    images.mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(n_images):
        name = f"img_{i:03d}"
        (images / f"{name}.png").write_bytes(
            png_bytes(size[0], size[1], seed=1000 + i)
        )
        records.append(
            {
                "id": name,
                "path": f"images/{name}.png",
                "width": size[0],
                "height": size[1],
                "source_tag": "test",
            }
        )
    manifest = {
        "name": "testset",
        "root": ".",
        "annotation_kind": annotation_kind,
        "categories": list(categories),
        "records": records,
    }
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return path
