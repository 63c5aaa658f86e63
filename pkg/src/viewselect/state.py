"""
Run ledger: which artifact was produced by which configuration
"""

import hashlib
import json
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from threading import Lock
from typing import Any, Dict, Optional

from utils.errors import DataError
from utils.logger import get_logger

logger = get_logger(__name__)

LEDGER_VERSION = 1


def file_sha256(path: Path) -> str:
    """SHA-256 of a file's content"""
    sha = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            sha.update(chunk)
    return sha.hexdigest()


@dataclass
class ArtifactRecord:
    """One produced file"""
    path: str
    kind: str
    config_digest: str
    sha256: str
    created: Optional[datetime] = None
    last_verified: Optional[datetime] = None
    run_count: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "path": self.path,
            "kind": self.kind,
            "config_digest": self.config_digest,
            "sha256": self.sha256,
            "created": self.created.isoformat() if self.created else None,
            "last_verified": self.last_verified.isoformat() if self.last_verified else None,
            "run_count": self.run_count,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ArtifactRecord':
        return cls(
            path=data["path"],
            kind=data["kind"],
            config_digest=data["config_digest"],
            sha256=data["sha256"],
            created=datetime.fromisoformat(data["created"]) if data.get("created") else None,
            last_verified=datetime.fromisoformat(data["last_verified"]) if data.get("last_verified") else None,
            run_count=data.get("run_count", 0),
        )


class RunLedger:
    """
    JSON ledger of artifacts, thread-safe, written with an atomic rename
    """

    def __init__(self, ledger_file: Path):
        self.ledger_file = Path(ledger_file)
        self.ledger_file.parent.mkdir(parents=True, exist_ok=True)
        self.artifacts: Dict[str, ArtifactRecord] = {}
        self._lock = Lock()
        self._load()

    @staticmethod
    def _key(path: Path) -> str:
        return str(Path(path).resolve())

    def _load(self):
        if not self.ledger_file.exists():
            logger.debug(f"No existing ledger at {self.ledger_file}")
            return
        try:
            with open(self.ledger_file, "r", encoding="utf-8") as f:
                data = json.load(f)
            for item in data.get("artifacts", []):
                record = ArtifactRecord.from_dict(item)
                self.artifacts[record.path] = record
        except (OSError, ValueError, KeyError) as e:
            raise DataError(f"Failed to load ledger from {self.ledger_file}", context={"error": str(e)})
        logger.debug(f"Loaded ledger with {len(self.artifacts)} artifacts")

    def _save(self):
        with self._lock:
            data = {
                "version": LEDGER_VERSION,
                "last_updated": datetime.now().isoformat(),
                "artifacts": [a.to_dict() for a in self.artifacts.values()],
            }
            temp_file = self.ledger_file.with_suffix(".tmp")
            try:
                with open(temp_file, "w", encoding="utf-8") as f:
                    json.dump(data, f, indent=2)
                temp_file.replace(self.ledger_file)
            except OSError as e:
                raise DataError(f"Failed to save ledger to {self.ledger_file}", context={"error": str(e)})

    def get(self, path: Path) -> Optional[ArtifactRecord]:
        with self._lock:
            return self.artifacts.get(self._key(path))

    def record(self, path: Path, kind: str, config_digest: str) -> ArtifactRecord:
        """
        Register a freshly written artifact

        Args:
            path: Artifact file
            kind: Artifact kind (features, quality, scores, model, report)
            config_digest: Digest of the producing configuration
        """
        key = self._key(path)
        sha = file_sha256(Path(path))
        now = datetime.now()
        with self._lock:
            previous = self.artifacts.get(key)
            record = ArtifactRecord(
                path=key,
                kind=kind,
                config_digest=config_digest,
                sha256=sha,
                created=now,
                last_verified=now,
                run_count=(previous.run_count if previous else 0) + 1,
            )
            self.artifacts[key] = record
        self._save()
        logger.debug(f"Recorded {kind} artifact", path=key, digest=config_digest[:12])
        return record

    def is_up_to_date(self, path: Path, config_digest: str) -> bool:
        """
        True if the file exists, was recorded under the same configuration
        digest and still has the recorded content
        """
        path = Path(path)
        record = self.get(path)
        if record is None or not path.exists():
            return False
        if record.config_digest != config_digest:
            return False
        if file_sha256(path) != record.sha256:
            logger.warning("Artifact changed on disk since it was recorded", path=str(path))
            return False
        with self._lock:
            record.last_verified = datetime.now()
        self._save()
        return True

    def forget(self, path: Optional[Path] = None):
        """Drop one artifact, or all of them"""
        with self._lock:
            if path is None:
                self.artifacts = {}
            else:
                self.artifacts.pop(self._key(path), None)
        self._save()

    def get_statistics(self) -> Dict[str, Any]:
        kinds: Dict[str, int] = {}
        for record in self.artifacts.values():
            kinds[record.kind] = kinds.get(record.kind, 0) + 1
        return {
            "artifacts": len(self.artifacts),
            "by_kind": kinds,
            "total_runs": sum(a.run_count for a in self.artifacts.values()),
        }
