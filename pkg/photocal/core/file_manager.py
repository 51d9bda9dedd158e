import hashlib
import json
import logging
import os
import tomllib
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ValidationError

from ..schemas.experiment import ExperimentConfig
from .exceptions import ConfigError, DataSchemaError, StorageError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def _json_default(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, BaseModel):
        return value.model_dump(mode="json")
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def dumps(data: Any) -> str:
    return json.dumps(data, indent=2, ensure_ascii=False, default=_json_default)


class RunFileManager:
    """File-based store for the datasets, results and manifest of one run."""

    def __init__(self, out_dir: PathLike):
        self.out_dir = Path(out_dir)
        try:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise StorageError(f"Cannot create output directory {self.out_dir}: {e}",
                               context={"path": str(self.out_dir)}) from e
        self.written: List[Path] = []

    def _get_file_path(self, name: str) -> Path:
        """Get the file path for an output name."""
        return self.out_dir / name

    def _atomic_write(self, path: Path, text: str) -> Path:
        # Write to temporary file first, then rename (atomic operation)
        temp_path = path.with_suffix(path.suffix + ".tmp")
        try:
            with open(temp_path, "w", encoding="utf-8", newline="") as f:
                f.write(text)
            os.replace(temp_path, path)
        except OSError as e:
            temp_path.unlink(missing_ok=True)
            raise StorageError(f"Error writing {path}: {e}", context={"path": str(path)}) from e
        if path not in self.written:
            self.written.append(path)
        logger.debug("Output file written", extra={"path": str(path)})
        return path

    def save_json(self, name: str, data: Any) -> Path:
        """
        Save JSON data to ``name`` inside the output directory.

        Args:
            name: File name relative to the output directory
            data: JSON-serialisable data (numpy values and pydantic models allowed)

        Returns:
            Path of the written file
        """
        return self._atomic_write(self._get_file_path(name), dumps(data) + "\n")

    def save_frame(self, name: str, frame: pd.DataFrame) -> Path:
        """Save a table as CSV without the index."""
        return self._atomic_write(self._get_file_path(name), frame.to_csv(index=False))

    def save_text(self, name: str, text: str) -> Path:
        return self._atomic_write(self._get_file_path(name), text)


def load_json(path: PathLike) -> Any:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError as e:
        raise StorageError(f"File not found: {path}", context={"path": str(path)}) from e
    except json.JSONDecodeError as e:
        raise DataSchemaError(f"{path} is not valid JSON: {e}", context={"path": str(path)}) from e
    except OSError as e:
        raise StorageError(f"Error reading {path}: {e}", context={"path": str(path)}) from e


def load_frame(path: PathLike, required: Optional[List[str]] = None) -> pd.DataFrame:
    """Read a CSV table, checking that ``required`` columns are present."""
    path = Path(path)
    try:
        frame = pd.read_csv(path)
    except FileNotFoundError as e:
        raise StorageError(f"File not found: {path}", context={"path": str(path)}) from e
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise DataSchemaError(f"{path} is not a readable CSV table: {e}",
                              context={"path": str(path)}) from e
    except OSError as e:
        raise StorageError(f"Error reading {path}: {e}", context={"path": str(path)}) from e
    missing = [c for c in (required or []) if c not in frame.columns]
    if missing:
        raise DataSchemaError(f"{path} is missing columns {missing}",
                              context={"path": str(path), "missing": missing})
    return frame


def _field_paths(error: ValidationError) -> List[str]:
    return [".".join(str(part) for part in item["loc"]) for item in error.errors()]


def parse_experiment_config(data: Dict[str, Any], source: str = "<config>") -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        paths = _field_paths(e)
        messages = [f"{'.'.join(str(p) for p in item['loc'])}: {item['msg']}" for item in e.errors()]
        raise ConfigError(
            f"Invalid configuration in {source}: " + "; ".join(messages),
            field_paths=paths,
            context={"path": source},
            suggestion="Fix the listed fields; physical quantities carry their unit in the field name",
        ) from e


def load_experiment_config(path: PathLike) -> ExperimentConfig:
    """
    Load and validate an experiment file. TOML is the primary format, JSON is
    accepted by extension.

    Raises:
        ConfigError: Parse failure or schema violation (with dotted field paths)
        StorageError: File cannot be read
    """
    path = Path(path)
    suffix = path.suffix.lower()
    try:
        if suffix == ".toml":
            with open(path, "rb") as f:
                data = tomllib.load(f)
        elif suffix == ".json":
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        else:
            raise ConfigError(f"Unsupported config format '{suffix}'",
                              context={"path": str(path)},
                              suggestion="Use a .toml or .json file")
    except FileNotFoundError as e:
        raise StorageError(f"Config file not found: {path}", context={"path": str(path)}) from e
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as e:
        raise ConfigError(f"Cannot parse {path}: {e}", context={"path": str(path)}) from e
    except OSError as e:
        raise StorageError(f"Error reading {path}: {e}", context={"path": str(path)}) from e
    return parse_experiment_config(data, str(path))


def config_hash(config: ExperimentConfig) -> str:
    """SHA-256 of the canonical JSON dump of a validated config."""
    canonical = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
