from __future__ import annotations

import json
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, List, Optional, Sequence

from pydantic import BaseModel

from schemas.config import config_hash
from schemas.manifest import RunManifest

APP_VERSION = "0.1.0"
MANIFEST_FILE = "run_manifest.json"


def utc_now() -> datetime:
    return datetime.now(timezone.utc).replace(microsecond=0)


class RunRecorder:
    """Collects what a command did and writes one run_manifest.json for it."""

    def __init__(
        self,
        command: str,
        argv: Sequence[str],
        *,
        config_path: Optional[Path] = None,
        config: Optional[BaseModel] = None,
        seed: Optional[int] = None,
    ) -> None:
        self.manifest = RunManifest(
            command=command,
            argv=list(argv),
            config_path=None if config_path is None else str(config_path),
            config=None if config is None else config.model_dump(mode="json"),
            config_hash=None if config is None else config_hash(config),
            seed=seed,
            version=APP_VERSION,
            started_at=utc_now(),
        )
        self._outputs: List[str] = []

    def add_output(self, path: Path | str) -> None:
        self._outputs.append(str(path))

    def finish(self, out_dir: Path, *, error: Optional[str] = None, extra_outputs: Sequence[Any] = ()) -> Path:
        for path in extra_outputs:
            self.add_output(path)
        self.manifest = self.manifest.model_copy(
            update={
                "finished_at": utc_now(),
                "status": "failed" if error else "ok",
                "outputs": sorted(set(self._outputs)),
                "error": error,
            }
        )
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / MANIFEST_FILE
        path.write_text(json.dumps(self.manifest.model_dump(mode="json"), indent=2) + "\n", encoding="utf-8")
        return path


def load_manifest(path: Path) -> RunManifest:
    return RunManifest.model_validate_json(Path(path).read_text(encoding="utf-8"))
