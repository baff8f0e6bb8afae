"""Deposit bundles: a plain, deterministic tar of a finalized dataset.

Member order is fixed (manifest.json, proofs.jsonl, objects sorted by
address, README.txt last) and all tar metadata is normalized, so the same
dataset always produces the same bytes and the bundle itself can be hashed
and cited. An extracted bundle is a dataset directory that ``tpsc verify``
accepts as is.
"""

from __future__ import annotations

import hashlib
import io
import json
import tarfile
from dataclasses import dataclass
from pathlib import Path

from tpsc._persist import atomic_write, canonical_json
from tpsc.errors import AddressMismatch, BundleError, DatasetError, MissingMember
from tpsc.manifest import DatasetManifest, load_manifest, manifest_file_bytes
from tpsc.stamper import ProofRecord, load_proofs
from tpsc.store import MemoryStore, ObjectStore

MANIFEST = "manifest.json"
PROOFS = "proofs.jsonl"
README = "README.txt"
FIXED_MTIME = 0

_README = """\
Tamper-evident sensor dataset {dataset_id}
==========================================

{description}
Location (as claimed by the creator, not verified): {location}
Creator key id: {creator_key_id}
Chunks: {n_chunks}    Records: {n_records}
Manifest hash (SHA-256 of the canonical manifest): {manifest_hash}

Contents
  manifest.json   chunk index, sensor descriptors, creator key id
  proofs.jsonl    timestamping proof records, one JSON object per line
  objects/aa/...  chunk files, each named by the SHA-256 of its bytes

Verifying with tpsc
  tar xf <bundle>.tar -C outdir && tpsc verify outdir

Verifying by hand
  1. For every file under objects/, SHA-256 the file; the hex digest must
     equal the two-character directory name followed by the file name.
  2. Each chunk starts with an 82-byte big-endian header: magic "TPC1",
     u16 version, 16-byte dataset id, u64 sequence, 32-byte previous-chunk
     hash, u64 first timestamp, u64 last timestamp, u32 record count.
     Chunk 0 carries 32 zero bytes as its previous hash; chunk k carries
     the SHA-256 of chunk k-1's file.
  3. Records follow the header, 19 bytes each: u16 sensor id, u8 flags,
     u64 timestamp (microseconds since the Unix epoch, UTC), f64 value.
  4. Remove "manifest_hash" from manifest.json, serialize it as JSON with
     sorted keys and no whitespace (UTF-8), SHA-256 it, and compare with
     manifest_hash.
  5. Look up every chunk hash and the manifest hash in proofs.jsonl; a
     confirmed record names the blockchain transaction (tx_id) and time.
     Confirm those with the timestamping service.
"""


def _tarinfo(name: str, size: int) -> tarfile.TarInfo:
    ti = tarfile.TarInfo(name)
    ti.size = size
    ti.mtime = FIXED_MTIME
    ti.mode = 0o644
    ti.uid = ti.gid = 0
    ti.uname = ti.gname = ""
    ti.type = tarfile.REGTYPE
    return ti


def _object_name(address: str) -> str:
    return f"objects/{address[:2]}/{address[2:]}"


def _proofs_bytes(proofs: dict[str, ProofRecord], wanted: set[str]) -> bytes:
    lines = [canonical_json(proofs[h].to_dict()) + "\n" for h in sorted(wanted) if h in proofs]
    return "".join(lines).encode("utf-8")


def write_bundle(dataset_dir: str | Path) -> bytes:
    """Bundle a finalized dataset; raises DatasetError if it is not finalized."""
    root = Path(dataset_dir)
    manifest = load_manifest(root / MANIFEST)
    if not manifest.finalized:
        raise DatasetError("dataset is not finalized; run `tpsc finalize` first")
    store = ObjectStore(root)
    proofs = load_proofs(root / PROOFS)
    addresses = sorted({c.hash for c in manifest.chunks})
    wanted = set(addresses) | {manifest.manifest_hash}

    members: list[tuple[str, bytes]] = [
        (MANIFEST, manifest_file_bytes(manifest)),
        (PROOFS, _proofs_bytes(proofs, wanted)),
    ]
    n_records = 0
    for a in addresses:
        data = store.get(a)
        n_records += int.from_bytes(data[78:82], "big")
        members.append((_object_name(a), data))
    readme = _README.format(
        dataset_id=manifest.dataset_id,
        description=manifest.metadata.get("description") or "(no description)",
        location=manifest.metadata.get("location") or "(none)",
        creator_key_id=manifest.creator_key_id or "(none)",
        n_chunks=len(manifest.chunks),
        n_records=n_records,
        manifest_hash=manifest.manifest_hash,
    )
    members.append((README, readme.encode("utf-8")))

    buf = io.BytesIO()
    with tarfile.open(fileobj=buf, mode="w", format=tarfile.USTAR_FORMAT) as tar:
        for name, data in members:
            tar.addfile(_tarinfo(name, len(data)), io.BytesIO(data))
    return buf.getvalue()


def export_bundle(dataset_dir: str | Path, out_path: str | Path) -> str:
    """Write the bundle to ``out_path``; returns its SHA-256 hex."""
    data = write_bundle(dataset_dir)
    atomic_write(out_path, data)
    return hashlib.sha256(data).hexdigest()


@dataclass
class BundleView:
    manifest: DatasetManifest
    store: MemoryStore
    proofs: dict[str, ProofRecord]
    readme: str


def read_bundle(archive: bytes | str | Path, strict: bool = True) -> BundleView:
    """Open a bundle and check every object listed by its manifest.

    With ``strict=False`` missing or mismatched objects are left for the
    verifier to report instead of raising here.
    """
    raw = archive if isinstance(archive, (bytes, bytearray)) else Path(archive).read_bytes()
    try:
        tar = tarfile.open(fileobj=io.BytesIO(raw), mode="r:")
    except tarfile.TarError as e:
        raise BundleError(f"not a tar archive: {e}") from e
    files: dict[str, bytes] = {}
    with tar:
        for m in tar.getmembers():
            if not m.isfile():
                continue
            if m.name.startswith("/") or ".." in Path(m.name).parts:
                raise BundleError(f"unsafe member name {m.name!r}")
            files[m.name] = tar.extractfile(m).read()
    for name in (MANIFEST, PROOFS, README):
        if name not in files:
            raise MissingMember(name)

    manifest = DatasetManifest.from_dict(json.loads(files[MANIFEST]))

    objects: dict[str, bytes] = {}
    for c in manifest.chunks:
        name = _object_name(c.hash)
        if name not in files:
            if not strict:
                continue
            raise MissingMember(c.hash)
        data = files[name]
        actual = hashlib.sha256(data).hexdigest()
        if actual != c.hash and strict:
            raise AddressMismatch(c.hash, actual)
        objects[c.hash] = data

    proofs = {}
    for line in files[PROOFS].decode("utf-8").splitlines():
        if line.strip():
            rec = ProofRecord.from_dict(json.loads(line))
            proofs[rec.hash] = rec
    return BundleView(manifest, MemoryStore(objects), proofs, files[README].decode("utf-8"))
