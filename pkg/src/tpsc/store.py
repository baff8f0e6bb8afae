"""Content-addressed object store for sealed chunks.

Objects live at ``objects/<first 2 hex>/<remaining 62 hex>`` where the hex
string is the SHA-256 of the object bytes. Writes go to a temp file in the
target directory and are renamed into place, so a reader never sees a
partial object. Every read re-hashes the bytes before returning them.
"""

from __future__ import annotations

import hashlib
import logging
import os
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import requests

from tpsc._persist import KeyedJsonl, backoff_delay
from tpsc.core import ChunkHash, hash_chunk
from tpsc.errors import CorruptObject, ObjectNotFound, ServiceUnavailable, StoreError

log = logging.getLogger(__name__)


def _address(address: ChunkHash | str) -> str:
    text = address.hex if isinstance(address, ChunkHash) else str(address)
    ChunkHash.from_hex(text)
    return text


class ObjectStore:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.objects = self.root / "objects"

    def path_for(self, address: ChunkHash | str) -> Path:
        a = _address(address)
        return self.objects / a[:2] / a[2:]

    def put(self, data: bytes) -> ChunkHash:
        h = hash_chunk(data)
        dest = self.path_for(h)
        if dest.exists():
            if hashlib.sha256(dest.read_bytes()).digest() == h.bytes:
                return h
            log.warning("object %s on disk is corrupt; rewriting it", h.hex)
        dest.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=dest.parent, prefix=".tmp-")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
                fh.flush()
                os.fsync(fh.fileno())
            # concurrent puts of the same content converge; rename is atomic
            os.replace(tmp, dest)
        except OSError as e:
            try:
                os.unlink(tmp)
            except FileNotFoundError:
                pass
            raise StoreError(f"could not store object {h.hex}: {e}") from e
        return h

    def read_raw(self, address: ChunkHash | str) -> bytes:
        """Bytes as found on disk, without the integrity check."""
        p = self.path_for(address)
        try:
            return p.read_bytes()
        except FileNotFoundError:
            raise ObjectNotFound(_address(address)) from None

    def get(self, address: ChunkHash | str) -> bytes:
        a = _address(address)
        data = self.read_raw(a)
        actual = hashlib.sha256(data).hexdigest()
        if actual != a:
            raise CorruptObject(a, actual)
        return data

    def __contains__(self, address) -> bool:
        return self.path_for(address).exists()

    def list(self) -> list[str]:
        if not self.objects.is_dir():
            return []
        out = []
        for sub in self.objects.iterdir():
            if sub.is_dir() and len(sub.name) == 2:
                out.extend(sub.name + f.name for f in sub.iterdir() if not f.name.startswith("."))
        return sorted(out)


class MemoryStore:
    """Read-side store over an in-memory mapping; same interface as ObjectStore."""

    def __init__(self, objects: dict[str, bytes]):
        self._objects = dict(objects)

    def read_raw(self, address) -> bytes:
        a = _address(address)
        try:
            return self._objects[a]
        except KeyError:
            raise ObjectNotFound(a) from None

    def get(self, address) -> bytes:
        a = _address(address)
        data = self.read_raw(a)
        actual = hashlib.sha256(data).hexdigest()
        if actual != a:
            raise CorruptObject(a, actual)
        return data

    def __contains__(self, address) -> bool:
        return _address(address) in self._objects

    def list(self) -> list[str]:
        return sorted(self._objects)


# -- remote pinning ------------------------------------------------------------


class GatewayClient:
    """Client for an IPFS-HTTP-API-style ``add`` endpoint.

    POST ``<base>/api/v0/add`` with a multipart ``file`` part; the JSON reply
    carries the content id under ``Hash`` (IPFS) or ``cid``.
    """

    def __init__(self, base_url: str, timeout: float = 10.0, session: requests.Session | None = None):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.session = session or requests.Session()

    def add(self, data: bytes, name: str = "chunk") -> str:
        try:
            r = self.session.post(
                f"{self.base_url}/api/v0/add",
                files={"file": (name, data, "application/octet-stream")},
                timeout=self.timeout,
            )
        except requests.RequestException as e:
            raise ServiceUnavailable(str(e)) from e
        if r.status_code >= 500:
            raise ServiceUnavailable(f"gateway answered {r.status_code}")
        if r.status_code != 200:
            raise StoreError(f"gateway rejected upload: {r.status_code} {r.text[:200]}")
        reply = r.json()
        cid = reply.get("Hash") or reply.get("cid")
        if not cid:
            raise StoreError(f"gateway reply has no content id: {reply}")
        return str(cid)


@dataclass
class PinRecord:
    address: str
    status: str = "queued"  # queued | pinned
    remote_id: str | None = None
    attempts: int = 0
    reason: str | None = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class Pinner:
    """Uploads local objects to a remote gateway; failures stay queued.

    The address -> remote id mapping is kept in a sidecar ``pins.jsonl``.
    """

    def __init__(self, store: ObjectStore, gateway: GatewayClient, sidecar: str | Path,
                 retry_base_s: float = 1.0, retry_cap_s: float = 300.0, clock=time.monotonic):
        self.store = store
        self.gateway = gateway
        self.records = KeyedJsonl(sidecar, "address")
        self.retry_base_s = retry_base_s
        self.retry_cap_s = retry_cap_s
        self.clock = clock
        self._next_try: dict[str, float] = {}

    def mapping(self) -> dict[str, str]:
        return {r["address"]: r["remote_id"] for r in self.records.values() if r["status"] == "pinned"}

    def enqueue(self, address: ChunkHash | str) -> None:
        a = _address(address)
        if a not in self.records.items:
            self.records.put(PinRecord(a).to_dict())

    def pin_remote(self, address: ChunkHash | str) -> PinRecord:
        a = _address(address)
        existing = self.records.items.get(a)
        if existing and existing["status"] == "pinned":
            return PinRecord(**existing)
        data = self.store.get(a)  # ObjectNotFound for unknown addresses
        rec = PinRecord(**existing) if existing else PinRecord(a)
        rec.attempts += 1
        try:
            rec.remote_id = self.gateway.add(data, name=a)
            rec.status, rec.reason = "pinned", None
        except ServiceUnavailable as e:
            rec.status, rec.reason = "queued", str(e)
            self._next_try[a] = self.clock() + backoff_delay(rec.attempts, self.retry_base_s, self.retry_cap_s)
            log.warning("pin %s queued for retry: %s", a, e)
        self.records.put(rec.to_dict())
        return rec

    def retry_due(self) -> int:
        """Retry queued pins whose backoff has elapsed; returns how many got pinned."""
        done = 0
        now = self.clock()
        for r in self.records.values():
            if r["status"] == "queued" and self._next_try.get(r["address"], 0) <= now:
                if self.pin_remote(r["address"]).status == "pinned":
                    done += 1
        return done

    def queued(self) -> list[str]:
        return sorted(r["address"] for r in self.records.values() if r["status"] == "queued")
