"""Dataset manifest: chunk index plus sensor and creator metadata."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from tpsc._persist import atomic_write, canonical_json
from tpsc.core import SensorDescriptor
from tpsc.errors import ManifestError

MANIFEST_VERSION = 1


@dataclass
class ChunkEntry:
    sequence: int
    hash: str
    first_ts_us: int
    last_ts_us: int
    record_count: int
    remote_id: str | None = None

    def to_dict(self) -> dict:
        d = {
            "sequence": self.sequence,
            "hash": self.hash,
            "first_ts_us": self.first_ts_us,
            "last_ts_us": self.last_ts_us,
            "record_count": self.record_count,
        }
        if self.remote_id is not None:
            d["remote_id"] = self.remote_id
        return d


@dataclass
class DatasetManifest:
    dataset_id: str
    creator_key_id: str = ""
    sensors: list[SensorDescriptor] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    chunks: list[ChunkEntry] = field(default_factory=list)
    finalized: bool = False
    manifest_hash: str | None = None
    manifest_version: int = MANIFEST_VERSION

    def problems(self) -> list[str]:
        out = []
        if self.manifest_version != MANIFEST_VERSION:
            out.append(f"unsupported manifest_version {self.manifest_version}")
        if len(self.dataset_id) != 32 or any(c not in "0123456789abcdef" for c in self.dataset_id):
            out.append("dataset_id must be 32 lowercase hex characters")
        ids = [s.sensor_id for s in self.sensors]
        if len(ids) != len(set(ids)):
            out.append("sensor ids are not unique")
        for i, c in enumerate(self.chunks):
            if c.sequence != i:
                out.append(f"chunk entry {i} has sequence {c.sequence}")
        if self.finalized and not self.manifest_hash:
            out.append("finalized manifest lacks manifest_hash")
        return out

    def to_dict(self, include_hash: bool = True) -> dict:
        d = {
            "manifest_version": self.manifest_version,
            "dataset_id": self.dataset_id,
            "creator_key_id": self.creator_key_id,
            "sensors": [s.to_dict() for s in self.sensors],
            "metadata": dict(self.metadata),
            "chunks": [c.to_dict() for c in self.chunks],
            "finalized": self.finalized,
        }
        if include_hash and self.manifest_hash is not None:
            d["manifest_hash"] = self.manifest_hash
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        try:
            return cls(
                manifest_version=int(d.get("manifest_version", MANIFEST_VERSION)),
                dataset_id=str(d["dataset_id"]),
                creator_key_id=str(d.get("creator_key_id", "")),
                sensors=[SensorDescriptor.from_dict(s) for s in d.get("sensors", [])],
                metadata=dict(d.get("metadata") or {}),
                chunks=[ChunkEntry(**c) for c in d.get("chunks", [])],
                finalized=bool(d.get("finalized", False)),
                manifest_hash=d.get("manifest_hash"),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ManifestError(f"malformed manifest: {e}") from e


def canonical_manifest_bytes(manifest: DatasetManifest | dict) -> bytes:
    """Sorted-key, whitespace-free UTF-8 JSON without ``manifest_hash``."""
    if isinstance(manifest, dict):
        manifest = DatasetManifest.from_dict(manifest)
    bad = [p for p in manifest.problems() if "manifest_hash" not in p]
    if bad:
        raise ManifestError("; ".join(bad))
    return canonical_json(manifest.to_dict(include_hash=False)).encode("utf-8")


def compute_manifest_hash(manifest: DatasetManifest) -> str:
    return hashlib.sha256(canonical_manifest_bytes(manifest)).hexdigest()


def load_manifest(path: str | Path) -> DatasetManifest:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ManifestError(f"manifest is not valid JSON: {e}") from e
    return DatasetManifest.from_dict(data)


def manifest_file_bytes(manifest: DatasetManifest) -> bytes:
    return (json.dumps(manifest.to_dict(), sort_keys=True, indent=2) + "\n").encode("utf-8")


def save_manifest(path: str | Path, manifest: DatasetManifest) -> None:
    atomic_write(path, manifest_file_bytes(manifest))
