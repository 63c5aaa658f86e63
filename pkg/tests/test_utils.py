"""
Tests for the shared error and logging utilities
"""

import json
import logging

import numpy as np
import pytest

from utils import errors
from utils.logger import StageMetrics, get_logger, setup_file_logging


def test_error_context_rendering():
    """Test that context is appended to the message"""
    err = errors.DataError("Bad file", context={"file": "a.svsf", "bytes": 3})
    assert str(err) == "Bad file [Context: file=a.svsf, bytes=3]"
    assert str(errors.DataError("Bad file")) == "Bad file"


@pytest.mark.parametrize("error_class, exit_code", [
    (errors.ValidationError, 2),
    (errors.ConfigurationError, 2),
    (errors.TruncatedFileError, 3),
    (errors.ChecksumError, 3),
    (errors.UnknownCategoryError, 3),
    (errors.CoverageUnreachableError, 4),
    (errors.MissingScoresError, 4),
    (errors.WorldGenerationError, 4),
])
def test_exit_codes_follow_family(error_class, exit_code):
    """Test that every error maps to its family's exit code"""
    assert error_class("x").exit_code == exit_code


def test_validation_error_keeps_violations():
    """Test that violations land in the context"""
    err = errors.ValidationError("Invalid configuration", violations=["seed: required", "threads: must be >= 1"])
    assert err.violations == ["seed: required", "threads: must be >= 1"]
    assert err.context["violations"] == err.violations


def test_training_diverged_error():
    """Test the divergence error carries epoch and loss"""
    err = errors.TrainingDivergedError(7, float("nan"))
    assert err.epoch == 7
    assert "epoch 7" in err.message
    assert isinstance(err, errors.ComputationError)


def test_logger_renders_context(mocker):
    """Test that persistent and per-call context are merged"""
    log = get_logger("test")
    spy = mocker.patch.object(log.logger, "info")
    log.add_context(run="r1")
    try:
        log.info("Scored", views=12)
    finally:
        log.clear_context()
    spy.assert_called_once_with("Scored [run=r1 | views=12]")

    log.info("Plain")
    spy.assert_called_with("Plain")


def test_coverage_audit_fields(mocker):
    """Test the coverage histogram line"""
    log = get_logger()
    spy = mocker.patch.object(log.logger, "info")
    log.coverage_audit(50, np.array([0, 2, 4, 6, 8]), min_coverage=4)
    message = spy.call_args[0][0]
    assert message.startswith("Coverage audit")
    assert "problems=50" in message
    assert "min=0" in message and "max=8" in message
    assert "median=4.0" in message
    assert "below_floor=2" in message

    spy.reset_mock()
    log.coverage_audit(0, np.array([], dtype=np.int64), min_coverage=1)
    spy.assert_not_called()


def test_epoch_progress_interval(mocker):
    """Test that epochs are logged on the interval and at the end"""
    log = get_logger()
    spy = mocker.patch.object(log.logger, "info")
    for epoch in range(1, 8):
        log.epoch_progress(epoch, 7, 0.5, every=3)
    logged = [call[0][0] for call in spy.call_args_list]
    assert len(logged) == 3
    assert "epoch=3/7" in logged[0] and "epoch=7/7" in logged[2]


def test_stage_metrics():
    """Test stage durations, counters and export"""
    metrics = StageMetrics()
    metrics.start_stage("score")
    metrics.start_stage("accumulate")
    metrics.count("accumulate", views=10)
    metrics.count("accumulate", views=5)
    assert metrics.end_stage("accumulate", success=True) >= 0.0
    metrics.end_stage("score", success=False, error=ValueError("boom"))
    metrics.start_stage("unfinished")

    rows = metrics.summary_rows()
    assert [r[0] for r in rows] == ["score", "accumulate"]
    assert rows[0][2] == "failed"
    assert rows[1][2:] == ["ok", "views=15"]
    assert metrics.end_stage("never-started", success=True) == 0.0

    exported = json.loads(metrics.to_json())
    assert exported["score"]["error"] == "boom"
    assert exported["accumulate"]["counters"] == {"views": 15}
    assert exported["unfinished"]["duration_ms"] is None


def test_file_logging(tmp_path):
    """Test that file logging writes plain messages"""
    log = get_logger()
    log_file = setup_file_logging(tmp_path / "logs", "DEBUG")
    try:
        log.warning("Written to file", views=3)
    finally:
        handler = log.logger.handlers[-1]
        log.logger.removeHandler(handler)
        handler.close()
    text = log_file.read_text(encoding="utf-8")
    assert "WARNING - Written to file [views=3]" in text
    assert isinstance(handler, logging.FileHandler)
