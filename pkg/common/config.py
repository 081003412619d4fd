from __future__ import annotations

import os
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, Optional, Type, TypeVar

from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel
from pydantic import ValidationError as PydanticValidationError

from common.errors import NotFoundError, ValidationError

ModelT = TypeVar("ModelT", bound=BaseModel)


class ConfigError(RuntimeError):
    """Raised when required configuration is missing or invalid."""


@dataclass(frozen=True)
class RuntimeSettings:
    num_threads: int
    num_workers: int
    device: str


@dataclass(frozen=True)
class ServingSettings:
    checkpoint_path: Optional[Path]


@dataclass(frozen=True)
class Settings:
    environment: str
    log_level: str
    runtime: RuntimeSettings
    serving: ServingSettings


def _read_optional(env_name: str) -> Optional[str]:
    value = os.getenv(env_name)
    return value.strip() if value and value.strip() else None


def _read_int(env_name: str, default: int, *, minimum: int = 0) -> int:
    raw = _read_optional(env_name)
    if raw is None:
        return default
    try:
        value = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{env_name} must be an integer.") from exc
    if value < minimum:
        raise ConfigError(f"{env_name} must be >= {minimum}, got {value}.")
    return value


def _read_optional_path(env_name: str) -> Optional[Path]:
    raw = _read_optional(env_name)
    if raw is None:
        return None

    path = Path(raw).expanduser()
    if not path.exists():
        raise ConfigError(f"Path defined by {env_name} does not exist: {path}")
    return path


@lru_cache()
def get_settings() -> Settings:
    """Load runtime settings from environment variables (and a local .env)."""
    load_dotenv()

    device = _read_optional("LANDMARK_DEVICE") or "cpu"
    if device not in {"cpu", "cuda"}:
        raise ConfigError(f"LANDMARK_DEVICE must be 'cpu' or 'cuda', got '{device}'.")

    return Settings(
        environment=_read_optional("LANDMARK_ENV") or "development",
        log_level=_read_optional("LANDMARK_LOG_LEVEL") or "INFO",
        runtime=RuntimeSettings(
            num_threads=_read_int("LANDMARK_NUM_THREADS", 1, minimum=1),
            num_workers=_read_int("LANDMARK_NUM_WORKERS", 0),
            device=device,
        ),
        serving=ServingSettings(checkpoint_path=_read_optional_path("LANDMARK_CHECKPOINT")),
    )


# --------------------------------------------------------------------- #
# Flat key=value experiment documents                                   #
# --------------------------------------------------------------------- #


def _nest(flat: Dict[str, Optional[str]]) -> Dict[str, Any]:
    """Turn dotted keys (``optimizer.lr``) into nested dicts."""
    nested: Dict[str, Any] = {}
    for key, value in flat.items():
        if value is None:
            continue
        cursor = nested
        parts = key.strip().split(".")
        for part in parts[:-1]:
            cursor = cursor.setdefault(part, {})
            if not isinstance(cursor, dict):
                raise ValidationError(
                    f"Config key '{key}' conflicts with a scalar value.", details={"field": key}
                )
        cursor[parts[-1]] = value.strip()
    return nested


def _flatten(payload: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    flat: Dict[str, Any] = {}
    for key, value in payload.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, prefix=f"{name}."))
        else:
            flat[name] = value
    return flat


def parse_config(payload: Dict[str, Any], model: Type[ModelT], *, source: str = "<config>") -> ModelT:
    """Validate a nested dict against ``model``, naming the offending field on failure."""
    try:
        return model.model_validate(payload)
    except PydanticValidationError as exc:
        first = exc.errors()[0]
        field = ".".join(str(part) for part in first["loc"])
        raise ValidationError(
            f"Invalid config field '{field}' in {source}: {first['msg']}",
            details={"field": field, "source": source},
        ) from exc


def load_flat_config(path: Path, model: Type[ModelT]) -> ModelT:
    """Load a flat ``key=value`` document into a pydantic config model."""
    if not path.exists():
        raise NotFoundError(f"Config file '{path}' does not exist.", details={"path": str(path)})

    flat = dotenv_values(path)
    return parse_config(_nest(dict(flat)), model, source=str(path))


def dump_flat_config(config: BaseModel) -> str:
    """Render a config model back into the flat ``key=value`` form."""
    lines = []
    for key, value in _flatten(config.model_dump(mode="json")).items():
        if isinstance(value, (list, tuple)):
            value = ",".join(str(item) for item in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"
