"""
Run manifest written next to every command's outputs.
"""

from datetime import datetime, timezone
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field


class RunManifest(BaseModel):
    """Provenance of one command invocation."""

    model_config = ConfigDict(extra="forbid")

    tool: str = Field("photocal", description="Tool that produced the run")
    tool_version: str = Field(..., description="Version of the tool")
    command: str = Field(..., description="simulate, calibrate, tomography or report")
    subtype: str = Field(..., description="Experiment kind")
    run_id: Optional[str] = Field(None, description="Unique run identifier")

    config_hash: Optional[str] = Field(None, description="SHA-256 of the canonical config JSON")
    seed: Optional[int] = Field(None, ge=0, description="Seed of the random streams")

    started_at: datetime = Field(default_factory=lambda: datetime.now(timezone.utc))
    finished_at: Optional[datetime] = None

    inputs: List[str] = Field(default_factory=list, description="Input file paths")
    outputs: List[str] = Field(default_factory=list, description="Output file paths")
    results: Dict[str, Any] = Field(default_factory=dict, description="Key results summary")

    def finish(self) -> "RunManifest":
        self.finished_at = datetime.now(timezone.utc)
        return self
