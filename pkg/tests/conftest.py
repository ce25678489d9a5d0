from __future__ import annotations

from pathlib import Path

import pytest

from sim2real.dataset import load_manifest

from helpers import write_dataset


@pytest.fixture
def plain_manifest(tmp_path: Path):
    return load_manifest(write_dataset(tmp_path, n_images=3))
