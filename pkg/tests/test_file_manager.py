"""
Tests for run storage, experiment configuration, error reports, settings
and structured logging.
"""

import io
import json
import logging

import numpy as np
import pandas as pd
import pytest

from photocal.config import PhotocalSettings
from photocal.core.error_handlers import ErrorHandler, exit_code_for, handle_cli_exception
from photocal.core.exceptions import (
    ConfigError,
    DataSchemaError,
    FitError,
    PeakUnusableError,
    StorageError,
)
from photocal.core.file_manager import (
    RunFileManager,
    config_hash,
    load_experiment_config,
    load_frame,
    load_json,
    parse_experiment_config,
)
from photocal.logging_config import StructuredFormatter, get_run_logger, setup_logging
from photocal.schemas import ErrorCategory
from photocal.schemas.manifest import RunManifest

KLYSHKO_TOML = """
[klyshko]
pair_rate_per_window = 0.01
eta_trigger = 0.5
eta_dut = 0.0709
acquisition_windows = 100000
coincidence_window_s = 1e-8
seed = 4
"""


class TestRunFileManager:
    """Atomic output files."""

    def test_save_json_with_numpy_values(self, out_dir):
        files = RunFileManager(out_dir)
        path = files.save_json("result.json", {"eta": np.float64(0.5), "counts": np.arange(3)})
        assert json.loads(path.read_text()) == {"eta": 0.5, "counts": [0, 1, 2]}
        assert files.written == [path]
        assert not (out_dir / "result.json.tmp").exists()

    def test_save_frame_without_index(self, out_dir):
        files = RunFileManager(out_dir)
        files.save_frame("table.csv", pd.DataFrame({"m": [0, 1], "fidelity": [1.0, 0.99]}))
        assert load_frame(out_dir / "table.csv", ["m", "fidelity"]).shape == (2, 2)

    def test_save_manifest_model(self, out_dir):
        files = RunFileManager(out_dir)
        manifest = RunManifest(tool_version="0.1.0", command="simulate", subtype="pnrd", seed=1)
        files.save_json("manifest.json", manifest.finish())
        data = load_json(out_dir / "manifest.json")
        assert data["command"] == "simulate"
        assert data["finished_at"] is not None

    def test_rewrite_is_recorded_once(self, out_dir):
        files = RunFileManager(out_dir)
        files.save_text("summary.txt", "a")
        files.save_text("summary.txt", "b")
        assert files.written == [out_dir / "summary.txt"]
        assert (out_dir / "summary.txt").read_text() == "b"

    def test_missing_files(self, tmp_path):
        with pytest.raises(StorageError):
            load_json(tmp_path / "missing.json")
        with pytest.raises(StorageError):
            load_frame(tmp_path / "missing.csv")

    def test_malformed_files(self, tmp_path):
        (tmp_path / "bad.json").write_text("{not json")
        with pytest.raises(DataSchemaError):
            load_json(tmp_path / "bad.json")
        (tmp_path / "table.csv").write_text("a,b\n1,2\n")
        with pytest.raises(DataSchemaError):
            load_frame(tmp_path / "table.csv", ["amplitude_ev"])


class TestExperimentConfig:
    """Experiment files."""

    def test_toml(self, tmp_path):
        path = tmp_path / "run.toml"
        path.write_text(KLYSHKO_TOML)
        config = load_experiment_config(path)
        assert config.klyshko.eta_dut == pytest.approx(0.0709)
        assert config.klyshko.repeats == 10
        assert config.tomography.coherent.truncation == 140

    def test_json(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"coherent": {"dut": {"eta": 0.051, "truncation": 140}}}))
        config = load_experiment_config(path)
        assert config.coherent.probe_means().size == 20

    def test_field_paths_in_error(self):
        with pytest.raises(ConfigError) as info:
            parse_experiment_config({"klyshko": {"pair_rate_per_window": 0.01, "eta_trigger": 1.5,
                                                 "eta_dut": 0.1, "acquisition_windows": 10}})
        assert "klyshko.eta_trigger" in info.value.field_paths

    def test_unknown_field(self):
        with pytest.raises(ConfigError) as info:
            parse_experiment_config({"pnrd": {"bogus": 1}})
        assert any(path.startswith("pnrd") for path in info.value.field_paths)

    def test_unsupported_format(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text("klyshko: {}")
        with pytest.raises(ConfigError):
            load_experiment_config(path)

    def test_unparseable_toml(self, tmp_path):
        path = tmp_path / "run.toml"
        path.write_text("[klyshko\n")
        with pytest.raises(ConfigError):
            load_experiment_config(path)

    def test_missing_config(self, tmp_path):
        with pytest.raises(StorageError):
            load_experiment_config(tmp_path / "absent.toml")

    def test_hash_ignores_key_order(self, tmp_path):
        a = parse_experiment_config({"klyshko": {"pair_rate_per_window": 0.01, "eta_trigger": 0.5,
                                                 "eta_dut": 0.1, "acquisition_windows": 10}})
        b = parse_experiment_config({"klyshko": {"acquisition_windows": 10, "eta_dut": 0.1,
                                                 "eta_trigger": 0.5, "pair_rate_per_window": 0.01}})
        c = parse_experiment_config({"klyshko": {"pair_rate_per_window": 0.02, "eta_trigger": 0.5,
                                                 "eta_dut": 0.1, "acquisition_windows": 10}})
        assert config_hash(a) == config_hash(b)
        assert config_hash(a) != config_hash(c)
        assert len(config_hash(a)) == 64


class TestErrorReports:
    """Exception to report and exit code mapping."""

    def test_config_error_lists_fields(self):
        exc = ConfigError("bad config", field_paths=["klyshko.eta_dut", "pnrd.pulses"])
        report = ErrorHandler.from_exception(exc, "simulate klyshko", "run-1")
        assert report.category == ErrorCategory.CONFIG
        assert [d.field for d in report.details] == ["klyshko.eta_dut", "pnrd.pulses"]
        assert exit_code_for(report) == 2

    @pytest.mark.parametrize("exc, code", [
        (DataSchemaError("bad data"), 3),
        (FitError("no fit", residual_norm=1.0), 4),
        (StorageError("disk"), 5),
        (PeakUnusableError("no peak"), 6),
        (RuntimeError("boom"), 1),
    ])
    def test_exit_codes(self, exc, code):
        assert exit_code_for(ErrorHandler.from_exception(exc, "calibrate pnrd")) == code

    def test_cli_report_on_stream(self):
        stream = io.StringIO()
        code = handle_cli_exception(DataSchemaError("missing column", context={"path": "x.csv"}),
                                    "calibrate pnrd", "run-2", stream=stream)
        report = json.loads(stream.getvalue())
        assert code == 3
        assert report["success"] is False
        assert report["error_code"] == "INVALID_DATA"
        assert report["run_id"] == "run-2"
        assert report["context"] == {"path": "x.csv"}

    def test_unexpected_exception_is_internal(self):
        stream = io.StringIO()
        assert handle_cli_exception(KeyError("x"), "report", stream=stream) == 1
        report = json.loads(stream.getvalue())
        assert report["category"] == "internal"
        assert report["context"]["exception_type"] == "KeyError"


class TestSettings:
    """Environment-driven runtime settings."""

    def test_defaults(self, monkeypatch):
        for name in ("PHOTOCAL_LOG", "PHOTOCAL_LOG_LEVEL", "PHOTOCAL_THREADS"):
            monkeypatch.delenv(name, raising=False)
        settings = PhotocalSettings(_env_file=None)
        assert settings.log_level == "WARNING"
        assert settings.threads == 1

    def test_log_level_from_environment(self, monkeypatch):
        monkeypatch.setenv("PHOTOCAL_LOG", "debug")
        monkeypatch.setenv("PHOTOCAL_THREADS", "4")
        settings = PhotocalSettings(_env_file=None)
        assert settings.log_level == "DEBUG"
        assert settings.threads == 4


class TestLogging:
    """Structured log lines."""

    def test_formatter_emits_json_with_extras(self):
        record = logging.LogRecord("photocal.core.klyshko", logging.WARNING, __file__, 10,
                                   "Efficiency estimate outside [0, 1]", None, None)
        record.estimate = 1.2
        record.tool = "photocal"
        line = json.loads(StructuredFormatter().format(record))
        assert line["level"] == "WARNING"
        assert line["tool"] == "photocal"
        assert line["extra"] == {"estimate": 1.2}

    def test_run_logger_tags_records(self):
        tool_logger = setup_logging("photocal-test", "INFO", use_json_format=True,
                                    enable_console=False)
        records = []

        class Collect(logging.Handler):
            def emit(self, record):
                records.append(record)

        tool_logger.logger.addHandler(Collect())
        get_run_logger(tool_logger, "run-9", "simulate pnrd").info("Run started")
        assert records[-1].run_id == "run-9"
        assert records[-1].operation == "simulate pnrd"
