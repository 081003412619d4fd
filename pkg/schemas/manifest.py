from __future__ import annotations

from datetime import datetime
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, Field


class RunManifest(BaseModel):
    """run_manifest.json written next to the outputs of every command."""

    command: str
    argv: List[str] = Field(default_factory=list)
    config_path: Optional[str] = None
    config: Optional[Dict[str, Any]] = None
    config_hash: Optional[str] = None
    seed: Optional[int] = None
    version: str
    started_at: datetime
    finished_at: Optional[datetime] = None
    status: Literal["running", "ok", "failed"] = "running"
    outputs: List[str] = Field(default_factory=list)
    error: Optional[str] = None
