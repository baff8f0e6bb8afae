"""Independent audit of a dataset from its manifest, object store and proofs.

Nothing here needs recording-time state, and nothing here writes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

from tpsc.core import ZERO_HASH, parse_chunk
from tpsc.errors import ChunkParseError, ChunkFormatError, ManifestError, ObjectNotFound, StoreError
from tpsc.manifest import DatasetManifest, compute_manifest_hash
from tpsc.stamper import ProofRecord

INTACT, UNCONFIRMED, INCOMPLETE, TAMPERED = "intact", "unconfirmed", "incomplete", "tampered"
_RANK = {INTACT: 0, UNCONFIRMED: 1, INCOMPLETE: 2, TAMPERED: 3}
EXIT_CODES = {INTACT: 0, UNCONFIRMED: 1, INCOMPLETE: 2, TAMPERED: 3}


def worst(*verdicts: str) -> str:
    return max(verdicts, key=_RANK.__getitem__, default=INTACT)


@dataclass
class ChunkChecks:
    bytes_present: bool = False
    hash_matches: bool = False
    link_matches: bool = False
    manifest_matches: bool = False
    proof_status: str = "missing"

    def verdict(self) -> str:
        if self.bytes_present and not (self.hash_matches and self.link_matches and self.manifest_matches):
            return TAMPERED
        if not self.bytes_present:
            return INCOMPLETE
        if self.proof_status in ("missing", "failed"):
            return INCOMPLETE
        if self.proof_status != "confirmed":
            return UNCONFIRMED
        return INTACT


@dataclass
class ChunkResult:
    sequence: int
    checks: ChunkChecks
    detail: list[str] = field(default_factory=list)

    @property
    def verdict(self) -> str:
        return self.checks.verdict()


@dataclass
class VerificationReport:
    dataset_id: str
    per_chunk: list[ChunkResult]
    verdict: str
    first_failure: int | None
    manifest_checks: dict = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    @property
    def exit_code(self) -> int:
        return EXIT_CODES[self.verdict]

    def to_dict(self) -> dict:
        return {
            "dataset_id": self.dataset_id,
            "verdict": self.verdict,
            "first_failure": self.first_failure,
            "manifest_checks": self.manifest_checks,
            "per_chunk": [
                {"sequence": r.sequence, "checks": r.checks.__dict__.copy(), "detail": r.detail}
                for r in self.per_chunk
            ],
            "warnings": self.warnings,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def to_text(self) -> str:
        lines = [
            f"dataset   {self.dataset_id}",
            f"chunks    {len(self.per_chunk)}",
            f"verdict   {self.verdict.upper()}",
        ]
        if self.first_failure is not None:
            lines.append(f"first failing sequence: {self.first_failure}")
        for k, v in sorted(self.manifest_checks.items()):
            lines.append(f"manifest  {k}: {v}")
        for r in self.per_chunk:
            c = r.checks
            if r.verdict == INTACT:
                continue
            flags = " ".join(
                f"{name}={'ok' if ok else 'FAIL'}"
                for name, ok in (("bytes", c.bytes_present), ("hash", c.hash_matches),
                                 ("link", c.link_matches), ("manifest", c.manifest_matches))
            )
            lines.append(f"  #{r.sequence:<6} {r.verdict:<11} {flags} proof={c.proof_status}")
            lines.extend(f"           {d}" for d in r.detail)
        lines.extend(f"warning: {w}" for w in self.warnings)
        return "\n".join(lines)


def _proof_status(proofs: dict[str, ProofRecord], hx: str) -> str:
    rec = proofs.get(hx)
    return rec.status if rec else "missing"


def verify_chunk_pair(prev: bytes, next_: bytes) -> bool:
    """True iff ``next_`` links to ``prev`` by hash, sequence and dataset."""
    a = parse_chunk(prev)
    b = parse_chunk(next_)
    return (
        b.header.dataset_id == a.header.dataset_id
        and b.header.prev_hash == hashlib.sha256(prev).digest()
        and b.header.sequence == a.header.sequence + 1
    )


def verify_dataset(manifest: DatasetManifest, store, proofs: dict[str, ProofRecord],
                   *, offline: bool = True) -> VerificationReport:
    """Check every chunk the manifest lists against the store and the proofs.

    The store needs ``read_raw(address)`` (raises ObjectNotFound). Verdict is
    the worst finding, tampered > incomplete > unconfirmed > intact, and
    ``first_failure`` is the lowest sequence carrying that worst finding.
    """
    warnings: list[str] = []
    if offline:
        warnings.append("proof status taken from the persisted proofs file, not re-queried")
    manifest_checks: dict = {}
    manifest_verdict = INTACT
    problems = manifest.problems()
    if problems:
        manifest_checks["structure"] = "; ".join(problems)
        manifest_verdict = TAMPERED
    if manifest.finalized and manifest.manifest_hash:
        try:
            ok = compute_manifest_hash(manifest) == manifest.manifest_hash
        except ManifestError:
            ok = False
        manifest_checks["hash_matches"] = ok
        status = _proof_status(proofs, manifest.manifest_hash)
        manifest_checks["proof_status"] = status
        if not ok:
            manifest_verdict = TAMPERED
        elif status in ("missing", "failed"):
            manifest_verdict = worst(manifest_verdict, INCOMPLETE)
        elif status != "confirmed":
            manifest_verdict = worst(manifest_verdict, UNCONFIRMED)
    else:
        warnings.append("dataset is not finalized; the chunk list itself is not timestamped")

    dataset_id = bytes.fromhex(manifest.dataset_id) if not problems else None
    results: list[ChunkResult] = []
    prev_actual_hash: bytes | None = None
    prev_ok = True  # whether the previous chunk's bytes are available

    for pos, entry in enumerate(manifest.chunks):
        checks = ChunkChecks(proof_status=_proof_status(proofs, entry.hash))
        res = ChunkResult(pos, checks)
        try:
            data = store.read_raw(entry.hash)
        except ObjectNotFound:
            res.detail.append("object missing from store")
            results.append(res)
            prev_actual_hash, prev_ok = None, False
            continue
        except (StoreError, OSError, ValueError) as e:
            res.detail.append(f"object unreadable: {e}")
            results.append(res)
            prev_actual_hash, prev_ok = None, False
            continue
        checks.bytes_present = True
        actual = hashlib.sha256(data).digest()
        checks.hash_matches = actual.hex() == entry.hash
        if not checks.hash_matches:
            res.detail.append(f"content hashes to {actual.hex()}")
        try:
            chunk = parse_chunk(data)
        except (ChunkParseError, ChunkFormatError) as e:
            res.detail.append(f"does not parse: {e}")
            chunk = None
        if chunk is not None:
            h = chunk.header
            checks.manifest_matches = (
                h.sequence == pos == entry.sequence
                and h.first_ts_us == entry.first_ts_us
                and h.last_ts_us == entry.last_ts_us
                and h.record_count == entry.record_count
                and (dataset_id is None or h.dataset_id == dataset_id)
            )
            if not checks.manifest_matches:
                res.detail.append("header disagrees with manifest entry")
            if pos == 0:
                checks.link_matches = h.prev_hash == ZERO_HASH
            elif prev_actual_hash is not None:
                checks.link_matches = h.prev_hash == prev_actual_hash
            elif not prev_ok:
                # predecessor missing: compare against the manifest's claim instead
                checks.link_matches = h.prev_hash.hex() == manifest.chunks[pos - 1].hash
            if not checks.link_matches:
                res.detail.append("prev_hash does not match the preceding chunk")
        results.append(res)
        prev_actual_hash, prev_ok = actual, True

    verdict = worst(manifest_verdict, *(r.verdict for r in results))
    first_failure = None
    if verdict != INTACT:
        hits = [r.sequence for r in results if r.verdict == verdict]
        # a manifest-level finding covers the whole chain, starting at 0
        if manifest_verdict == verdict or not hits:
            hits.append(0)
        first_failure = min(hits)
    return VerificationReport(
        dataset_id=manifest.dataset_id,
        per_chunk=results,
        verdict=verdict,
        first_failure=first_failure,
        manifest_checks=manifest_checks,
        warnings=warnings,
    )


def refresh_proofs(proofs: dict[str, ProofRecord], client) -> dict[str, ProofRecord]:
    """Re-query the service for non-final proofs; returns an updated copy, never persists."""
    out = dict(proofs)
    for hx, rec in proofs.items():
        if rec.status != "submitted":
            continue
        reply = client.proof(hx)
        if reply.get("status") == "confirmed":
            out[hx] = ProofRecord(**{**rec.to_dict(), "status": "confirmed", "tx_id": str(reply["tx_id"]),
                                     "blockchain_time_us": int(reply["timestamp"]) * 1_000_000})
    return out
