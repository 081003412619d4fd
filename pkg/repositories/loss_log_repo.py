from __future__ import annotations

from pathlib import Path
from typing import List

from pydantic import ValidationError as PydanticValidationError

from common.errors import DatasetError, NotFoundError
from schemas.training import LossRecord


class LossLogRepository:
    """Append-only JSON-lines loss log."""

    def __init__(self, path: Path) -> None:
        self._path = Path(path)

    @property
    def path(self) -> Path:
        return self._path

    def reset(self) -> None:
        self._path.parent.mkdir(parents=True, exist_ok=True)
        self._path.write_text("", encoding="utf-8")

    def append(self, records: List[LossRecord]) -> None:
        if not records:
            return
        self._path.parent.mkdir(parents=True, exist_ok=True)
        with self._path.open("a", encoding="utf-8") as handle:
            for record in records:
                handle.write(record.model_dump_json() + "\n")

    def read(self) -> List[LossRecord]:
        if not self._path.exists():
            raise NotFoundError(f"Loss log '{self._path}' does not exist.", details={"path": str(self._path)})
        records = []
        for line_no, line in enumerate(self._path.read_text(encoding="utf-8").splitlines(), start=1):
            if not line.strip():
                continue
            try:
                records.append(LossRecord.model_validate_json(line))
            except PydanticValidationError as exc:
                raise DatasetError(
                    "Malformed loss log record.", details={"file": str(self._path), "line": line_no}
                ) from exc
        return records
