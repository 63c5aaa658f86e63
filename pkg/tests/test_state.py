"""
Tests for the run ledger
"""

import json

import pytest

from viewselect.state import ArtifactRecord, RunLedger, file_sha256
from utils.errors import DataError


def test_artifact_record_round_trip():
    """Test record serialization"""
    record = ArtifactRecord(path="/tmp/x", kind="scores", config_digest="abc", sha256="def", run_count=2)
    assert ArtifactRecord.from_dict(record.to_dict()) == record


def test_record_and_up_to_date(tmp_path):
    """Test that a recorded artifact is current under the same digest"""
    artifact = tmp_path / "scores.svss"
    artifact.write_bytes(b"payload")
    ledger = RunLedger(tmp_path / ".ledger.json")

    record = ledger.record(artifact, "scores", "digest-a")
    assert record.run_count == 1
    assert record.sha256 == file_sha256(artifact)
    assert ledger.is_up_to_date(artifact, "digest-a")
    assert not ledger.is_up_to_date(artifact, "digest-b")


def test_changed_content_is_stale(tmp_path):
    """Test that editing an artifact on disk invalidates it"""
    artifact = tmp_path / "model.svsm"
    artifact.write_bytes(b"one")
    ledger = RunLedger(tmp_path / ".ledger.json")
    ledger.record(artifact, "model", "d")

    artifact.write_bytes(b"two")
    assert not ledger.is_up_to_date(artifact, "d")


def test_missing_artifact_is_stale(tmp_path):
    """Test that a deleted artifact is never current"""
    artifact = tmp_path / "report.json"
    artifact.write_text("{}", encoding="utf-8")
    ledger = RunLedger(tmp_path / ".ledger.json")
    ledger.record(artifact, "report", "d")
    artifact.unlink()
    assert not ledger.is_up_to_date(artifact, "d")
    assert not ledger.is_up_to_date(tmp_path / "never.json", "d")


def test_ledger_persists(tmp_path):
    """Test that a second ledger instance sees earlier records"""
    artifact = tmp_path / "features.svsf"
    artifact.write_bytes(b"abc")
    ledger_file = tmp_path / "state" / ".ledger.json"

    RunLedger(ledger_file).record(artifact, "features", "d1")
    reloaded = RunLedger(ledger_file)
    assert reloaded.get(artifact).kind == "features"
    assert reloaded.is_up_to_date(artifact, "d1")

    reloaded.record(artifact, "features", "d2")
    assert RunLedger(ledger_file).get(artifact).run_count == 2

    data = json.loads(ledger_file.read_text(encoding="utf-8"))
    assert data["version"] == 1
    assert len(data["artifacts"]) == 1


def test_forget(tmp_path):
    """Test forgetting one artifact and then all of them"""
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    a.write_bytes(b"a")
    b.write_bytes(b"b")
    ledger = RunLedger(tmp_path / ".ledger.json")
    ledger.record(a, "scores", "d")
    ledger.record(b, "model", "d")

    ledger.forget(a)
    assert ledger.get(a) is None
    assert ledger.get(b) is not None

    ledger.forget()
    assert ledger.get_statistics()["artifacts"] == 0


def test_statistics(tmp_path):
    """Test ledger statistics"""
    ledger = RunLedger(tmp_path / ".ledger.json")
    for name, kind in (("a", "scores"), ("b", "scores"), ("c", "model")):
        path = tmp_path / name
        path.write_bytes(name.encode())
        ledger.record(path, kind, "d")
    stats = ledger.get_statistics()
    assert stats["artifacts"] == 3
    assert stats["by_kind"] == {"scores": 2, "model": 1}
    assert stats["total_runs"] == 3


def test_corrupt_ledger_raises(tmp_path):
    """Test that an unreadable ledger is a data error"""
    ledger_file = tmp_path / ".ledger.json"
    ledger_file.write_text("not json", encoding="utf-8")
    with pytest.raises(DataError):
        RunLedger(ledger_file)
