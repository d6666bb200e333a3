"""Process settings from the environment and run configuration from JSON files."""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional

from pydantic import ValidationError as PydanticValidationError
from pydantic_settings import BaseSettings

from .errors import ConfigError
from .schemas import RunConfig

logger = logging.getLogger(__name__)


class Settings(BaseSettings):
    """Application settings."""
    app_name: str = "Laplace Adjoint"
    version: str = "0.1.0"
    debug: bool = False
    log_level: str = "INFO"
    out_dir: str = "runs"
    workers: int = 0

    class Config:
        env_prefix = "LAPLACE_"


_settings: Optional[Settings] = None


def get_settings() -> Settings:
    """Get the singleton settings instance."""
    global _settings
    if _settings is None:
        _settings = Settings()
    return _settings


def parse_config(document: Dict[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(document)
    except PydanticValidationError as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc


def load_config(path, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Read a JSON run configuration; ``overrides`` replace top-level keys (None values are ignored)."""
    path = Path(path)
    try:
        document = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(document, dict):
        raise ConfigError(f"{path}: top level must be an object")
    for key, value in (overrides or {}).items():
        if value is not None:
            document[key] = value
    config = parse_config(document)
    logger.debug("loaded config %s", path)
    return config


def resolve_data_path(config: RunConfig, config_path) -> Optional[Path]:
    """Data file of ``config``; relative paths are taken from the config file's directory."""
    if not config.model.data:
        return None
    data = Path(config.model.data)
    return data if data.is_absolute() else Path(config_path).parent / data


def dump_config(config: RunConfig) -> Dict[str, Any]:
    """The document that produced ``config`` (explicitly set keys only)."""
    return config.model_dump(mode="json", exclude_unset=True)
