from __future__ import annotations

import threading
import time
from pathlib import Path

import uvicorn

from backend_shim.app import ShimConfig, create_app

REPO_ROOT = Path(__file__).resolve().parents[2]
GOLDEN_DIR = REPO_ROOT / "tests" / "fixtures" / "golden"
SCHEMAS_DIR = REPO_ROOT / "schemas"


class LiveShim:
    """Run the shim on an ephemeral port in a background thread."""

    def __init__(self, config: ShimConfig | None = None) -> None:
        self.config = config or ShimConfig()
        self._server = uvicorn.Server(
            uvicorn.Config(
                create_app(self.config),
                host="127.0.0.1",
                port=0,
                log_level="warning",
            )
        )
        self._thread = threading.Thread(target=self._server.run, daemon=True)
        self.url = ""

    def __enter__(self) -> "LiveShim":
        self._thread.start()
        deadline = time.time() + 10
        while not self._server.started:
            if time.time() > deadline:
                raise RuntimeError("shim failed to start")
            time.sleep(0.01)
        port = self._server.servers[0].sockets[0].getsockname()[1]
        self.url = f"http://127.0.0.1:{port}"
        return self

    def __exit__(self, *exc) -> None:
        self._server.should_exit = True
        self._thread.join(timeout=10)
