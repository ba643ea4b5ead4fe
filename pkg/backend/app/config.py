"""
Configuration Management for jcimage

This module contains the process-level settings of the jcimage toolchain and
the loader for the build configuration file (MemoryConfig).
Process settings use Pydantic Settings so every value can be overridden from
the environment or a .env file; the build configuration is a JSON document
validated into pydantic models.

Key Components:
- Application metadata: name and generator version written into jni.h banners
- Logging: level and renderer (the only user-facing environment variable is
  JCIMAGE_LOG_LEVEL)
- Build: default flash base address, CAP build worker count
- Data assets: location of the JCVM instruction table

Author: jcimage maintainers
Version: 1.0.0
"""

from pathlib import Path
from typing import Optional, Union

import orjson
from pydantic import ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from app.core.exceptions import ConfigError
from app.models.memory import MemoryConfig

APP_DIR = Path(__file__).resolve().parent


class Settings(BaseSettings):
    """
    Central configuration class for jcimage

    Values are loaded from environment variables prefixed with ``JCIMAGE_``
    and from an optional ``.env`` file.

    Environment Variables:
        - JCIMAGE_LOG_LEVEL: log level (DEBUG, INFO, WARNING, ERROR)
    """

    model_config = SettingsConfigDict(
        env_prefix="JCIMAGE_",
        env_file=".env",
        extra="ignore",
        case_sensitive=False,
    )

    # =============================================================================
    # APPLICATION METADATA
    # =============================================================================
    APP_NAME: str = "jcimage"
    APP_VERSION: str = "1.0.0"

    # =============================================================================
    # LOGGING CONFIGURATION
    # =============================================================================
    LOG_LEVEL: str = "INFO"
    LOG_FORMAT: str = "json"  # "json" or "console"

    # =============================================================================
    # BUILD CONFIGURATION
    # =============================================================================
    DEFAULT_BASE_ADDRESS: int = 0x08000000  # STM32 flash bank
    BUILD_WORKERS: int = 1  # threads used for per-package CAP builds

    # =============================================================================
    # DATA ASSETS
    # =============================================================================
    INSTRUCTION_TABLE_PATH: Path = APP_DIR / "data" / "jcvm_instructions.json"


# =============================================================================
# GLOBAL CONFIGURATION INSTANCE
# =============================================================================
settings = Settings()


def load_memory_config(path: Optional[Union[str, Path]]) -> MemoryConfig:
    """
    Load a build configuration file

    A file without ``base_address`` takes ``settings.DEFAULT_BASE_ADDRESS``.

    Args:
        path: JSON file path; None returns the STM32F401RE defaults

    Returns:
        MemoryConfig: validated configuration

    Raises:
        ConfigError: unreadable file, invalid JSON or schema violation
    """
    if path is None:
        return MemoryConfig(base_address=settings.DEFAULT_BASE_ADDRESS)
    path = Path(path)
    try:
        raw = orjson.loads(path.read_bytes())
    except OSError as exc:
        raise ConfigError(path=str(path), reason=exc.strerror or str(exc)) from exc
    except orjson.JSONDecodeError as exc:
        raise ConfigError(path=str(path), reason=f"invalid JSON: {exc}") from exc
    if isinstance(raw, dict):
        raw.setdefault("base_address", settings.DEFAULT_BASE_ADDRESS)
    try:
        return MemoryConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(path=str(path), reason=str(exc)) from exc
