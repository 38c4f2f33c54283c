"""
settings.py.

Environment-driven configuration.

Values are read from the process environment after `load_dotenv()` has merged
a local `.env` file, then validated by a pydantic model.

Environment Variables
---------------------
- SAEIPW_LOG_LEVEL : str
    Logging level (default ``INFO``).
- SAEIPW_LOG_DIR : str
    Directory for the rotating JSON log file (default ``logs``).
- SAEIPW_WORKERS : int
    Default worker processes for simulation studies (default 1).
- SAEIPW_CLIP : float
    Default propensity clipping bound (default 0.005).

Functions
---------
get_settings() -> Settings
    Load and validate the current environment.
load_config_file(path) -> dict[str, str]
    Read a flat KEY=VALUE run configuration file.
"""

import os
from pathlib import Path

from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, Field, ValidationError, field_validator

from saeipw.errors import ConfigError


class Settings(BaseModel):
    """Validated environment configuration."""

    log_level: str = Field("INFO", description="Root logging level.")
    log_dir: str = Field("logs", description="Directory of the JSON log file.")
    workers: int = Field(1, ge=1, description="Default simulation worker count.")
    clip: float = Field(
        0.005, gt=0.0, lt=0.5, description="Default propensity clipping bound."
    )

    @field_validator("log_level")
    @classmethod
    def _upper(cls, value: str) -> str:
        return value.upper()


def get_settings() -> Settings:
    """
    Load settings from the environment.

    Returns
    -------
    Settings
        Validated settings.

    Raises
    ------
    ConfigError
        If an environment value fails validation.
    """
    load_dotenv()
    raw = {
        "log_level": os.environ.get("SAEIPW_LOG_LEVEL", "INFO"),
        "log_dir": os.environ.get("SAEIPW_LOG_DIR", "logs"),
        "workers": os.environ.get("SAEIPW_WORKERS", "1"),
        "clip": os.environ.get("SAEIPW_CLIP", "0.005"),
    }
    try:
        return Settings.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"invalid environment configuration: {exc}") from exc


def load_config_file(path: str | Path) -> dict[str, str]:
    """
    Read a flat key-value configuration file.

    Keys are normalised to lower case with dashes turned into underscores so
    ``boot-reps=200`` and ``BOOT_REPS=200`` name the same option.

    Parameters
    ----------
    path : str or Path
        File to read.

    Returns
    -------
    dict[str, str]
        Option name to raw string value.
    """
    file = Path(path)
    if not file.is_file():
        raise ConfigError(f"config file '{file}' does not exist")
    values = dotenv_values(file)
    return {
        key.strip().lower().replace("-", "_"): value
        for key, value in values.items()
        if value is not None
    }
