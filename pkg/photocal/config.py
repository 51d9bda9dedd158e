"""
Tool-wide configuration.

Runtime settings (verbosity, worker count) come from the environment or a
``.env`` file through pydantic-settings. Experiment parameters live in TOML/JSON
files and are validated by the models in :mod:`photocal.schemas.experiment`.
"""

from typing import Literal

from pydantic import AliasChoices, Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class PhotocalSettings(BaseSettings):
    """Runtime settings shared by every command."""

    log_level: Literal["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"] = Field(
        default="WARNING",
        validation_alias=AliasChoices("PHOTOCAL_LOG", "PHOTOCAL_LOG_LEVEL"),
        description="Logging level"
    )
    log_json: bool = Field(
        default=True,
        validation_alias=AliasChoices("PHOTOCAL_LOG_JSON"),
        description="Emit structured JSON log lines instead of plain text"
    )
    threads: int = Field(
        default=1,
        ge=1,
        validation_alias=AliasChoices("PHOTOCAL_THREADS"),
        description="Default cap on worker threads"
    )

    tool_name: str = Field(default="photocal", description="Tool name used in logs and manifests")
    tool_version: str = Field(default="0.1.0", description="Tool version recorded in manifests")

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
        validate_assignment=True
    )

    @field_validator("log_level", mode="before")
    @classmethod
    def validate_log_level(cls, v):
        """Ensure log level is uppercase."""
        if isinstance(v, str):
            return v.upper()
        return v


def get_settings() -> PhotocalSettings:
    """Read settings from the current environment."""
    return PhotocalSettings()
