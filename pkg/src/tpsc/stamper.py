"""Trusted-timestamping client, persistent proof records and a mock service.

Only 32-byte hashes ever leave the device. Wire protocol::

    POST /api/stamp            {"hash": "<64 hex>"}, header Authorization: <api key>
        200 {"status": "submitted"}      401 {"status": "unauthorized"}
    GET  /api/proof/<64 hex>
        200 {"status": "pending"}
        200 {"status": "confirmed", "tx_id": "...", "timestamp": <unix seconds>}
        404 {"status": "unknown"}

Submission is idempotent per hash at both ends: the proof store absorbs
duplicate submits and the service keys its ledger by hash.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import threading
import time
from dataclasses import asdict, dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Callable

import requests

from tpsc._persist import KeyedJsonl, backoff_delay, canonical_json
from tpsc.core import ChunkHash
from tpsc.errors import ServiceUnavailable, StamperError, UnknownHash

log = logging.getLogger(__name__)

API_KEY_ENV = "TPSC_API_KEY"
STATUSES = ("queued", "submitted", "confirmed", "failed")


def _now_us() -> int:
    return time.time_ns() // 1000


@dataclass
class ProofRecord:
    hash: str
    submitted_at_us: int
    service_url: str
    status: str = "queued"
    tx_id: str | None = None
    blockchain_time_us: int | None = None
    attempts: int = 0
    reason: str | None = None

    def __post_init__(self):
        if self.status not in STATUSES:
            raise ValueError(f"bad proof status {self.status!r}")

    @property
    def confirmed(self) -> bool:
        return self.status == "confirmed"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ProofRecord":
        return cls(**{k: d.get(k) for k in cls.__dataclass_fields__ if k in d})


@dataclass(frozen=True)
class CreatorCredential:
    api_key: str = field(repr=False)

    def __post_init__(self):
        if not self.api_key:
            raise ValueError("empty API key")

    @property
    def key_id(self) -> str:
        return hashlib.sha256(self.api_key.encode("utf-8")).hexdigest()[:16]

    @classmethod
    def from_env(cls, environ=os.environ) -> "CreatorCredential | None":
        key = environ.get(API_KEY_ENV)
        return cls(key) if key else None


class ProofStore:
    """``proofs.jsonl``: one JSON object per line, keys sorted, last line per hash wins."""

    def __init__(self, path: str | Path):
        self._log = KeyedJsonl(path, "hash")
        self.path = self._log.path

    def get(self, hash_hex: str) -> ProofRecord | None:
        d = self._log.items.get(hash_hex)
        return ProofRecord.from_dict(d) if d else None

    def put(self, rec: ProofRecord) -> None:
        self._log.put(rec.to_dict())

    def all(self) -> dict[str, ProofRecord]:
        return {d["hash"]: ProofRecord.from_dict(d) for d in self._log.values()}

    def snapshot_bytes(self) -> bytes:
        return self._log.snapshot_bytes()

    def compact(self) -> None:
        self._log.compact()


def load_proofs(path: str | Path) -> dict[str, ProofRecord]:
    """Read a proofs file without opening it for writing."""
    p = Path(path)
    if not p.exists():
        return {}
    return ProofStore(p).all()


# -- service clients -------------------------------------------------------------


class AuthError(StamperError):
    pass


class HttpStampClient:
    """Talks the wire protocol above."""

    def __init__(self, url: str, timeout: float = 5.0):
        self.url = url.rstrip("/")
        self.timeout = timeout
        self.session = requests.Session()

    def _call(self, method: str, path: str, **kw) -> requests.Response:
        try:
            return self.session.request(method, self.url + path, timeout=self.timeout, **kw)
        except requests.RequestException as e:
            raise ServiceUnavailable(str(e)) from e

    def submit(self, hash_hex: str, api_key: str) -> None:
        r = self._call("POST", "/api/stamp", json={"hash": hash_hex},
                       headers={"Authorization": api_key})
        if r.status_code in (401, 403):
            raise AuthError(f"service rejected credential ({r.status_code})")
        if r.status_code != 200:
            raise ServiceUnavailable(f"service answered {r.status_code}")

    def proof(self, hash_hex: str) -> dict:
        r = self._call("GET", f"/api/proof/{hash_hex}")
        if r.status_code == 404:
            return {"status": "unknown"}
        if r.status_code != 200:
            raise ServiceUnavailable(f"service answered {r.status_code}")
        try:
            return r.json()
        except ValueError as e:
            raise ServiceUnavailable(f"unparseable proof reply: {e}") from e


class OriginStampClient(HttpStampClient):
    """Adapter for the hosted OriginStamp API. Disabled unless configured.

    Endpoint paths are configurable because the hosted API is versioned; the
    defaults follow its v3 REST layout. Only the hash is ever sent.
    """

    def __init__(self, url: str = "https://api.originstamp.com", timeout: float = 10.0,
                 create_path: str = "/v3/timestamp/create", status_path: str = "/v3/timestamp/{hash}"):
        super().__init__(url, timeout)
        self.create_path = create_path
        self.status_path = status_path

    def submit(self, hash_hex: str, api_key: str) -> None:
        r = self._call("POST", self.create_path, json={"hash": hash_hex},
                       headers={"Authorization": api_key})
        if r.status_code in (401, 403):
            raise AuthError(f"service rejected credential ({r.status_code})")
        if r.status_code != 200:
            raise ServiceUnavailable(f"service answered {r.status_code}")

    def proof(self, hash_hex: str, api_key: str | None = None) -> dict:
        headers = {"Authorization": api_key} if api_key else {}
        r = self._call("GET", self.status_path.format(hash=hash_hex), headers=headers)
        if r.status_code == 404:
            return {"status": "unknown"}
        if r.status_code != 200:
            raise ServiceUnavailable(f"service answered {r.status_code}")
        data = (r.json() or {}).get("data") or {}
        for ts in data.get("timestamps") or []:
            # submit_status 3 = tamper-proof (anchored and confirmed)
            if ts.get("submit_status") == 3 and ts.get("timestamp"):
                return {
                    "status": "confirmed",
                    "tx_id": ts.get("transaction"),
                    "timestamp": int(ts["timestamp"]) // 1000,
                }
        return {"status": "pending"}


# -- the stamper ----------------------------------------------------------------


class Stamper:
    def __init__(self, proofs: ProofStore, client: HttpStampClient,
                 credential: CreatorCredential | None, *,
                 retry_base_s: float = 1.0, retry_cap_s: float = 300.0,
                 poll_interval_s: float = 1.0,
                 clock: Callable[[], float] = time.monotonic,
                 now_us: Callable[[], int] = _now_us):
        self.proofs = proofs
        self.client = client
        self.credential = credential
        self.service_url = client.url
        self.retry_base_s = retry_base_s
        self.retry_cap_s = retry_cap_s
        self.poll_interval_s = poll_interval_s
        self.clock = clock
        self.now_us = now_us
        self._lock = threading.RLock()
        self._next_try: dict[str, float] = {}
        self._fail_streak: dict[str, int] = {}

    @staticmethod
    def _hex(h: ChunkHash | str) -> str:
        return h.hex if isinstance(h, ChunkHash) else ChunkHash.from_hex(h).hex

    def enqueue(self, h: ChunkHash | str) -> ProofRecord:
        """Persist a queued record for ``h`` unless one already exists."""
        hx = self._hex(h)
        with self._lock:
            rec = self.proofs.get(hx)
            if rec is None:
                rec = ProofRecord(hx, self.now_us(), self.service_url)
                self.proofs.put(rec)
            return rec

    def submit_hash(self, h: ChunkHash | str, cred: CreatorCredential | None = None) -> ProofRecord:
        hx = self._hex(h)
        cred = cred or self.credential
        if cred is None:
            raise StamperError("no creator credential available")
        with self._lock:
            rec = self.proofs.get(hx) or ProofRecord(hx, self.now_us(), self.service_url)
            if rec.status in ("submitted", "confirmed", "failed"):
                return rec
            rec.attempts += 1
            try:
                self.client.submit(hx, cred.api_key)
            except AuthError as e:
                rec.status, rec.reason = "failed", str(e)
            except ServiceUnavailable as e:
                rec.status, rec.reason = "queued", str(e)
                n = self._fail_streak.get(hx, 0) + 1
                self._fail_streak[hx] = n
                self._next_try[hx] = self.clock() + backoff_delay(n, self.retry_base_s, self.retry_cap_s)
                log.info("stamp %s queued (attempt %d): %s", hx[:16], rec.attempts, e)
            else:
                rec.status, rec.reason = "submitted", None
                rec.submitted_at_us = self.now_us()
                self._fail_streak.pop(hx, None)
                self._next_try[hx] = self.clock() + self.poll_interval_s
            self.proofs.put(rec)
            return rec

    def poll_proof(self, h: ChunkHash | str) -> ProofRecord:
        hx = self._hex(h)
        with self._lock:
            rec = self.proofs.get(hx)
            if rec is None or rec.status == "queued":
                raise UnknownHash(hx)
            if rec.status in ("confirmed", "failed"):
                return rec
            reply = self.client.proof(hx)
            status = reply.get("status")
            if status == "confirmed":
                rec.status = "confirmed"
                rec.tx_id = str(reply["tx_id"])
                rec.blockchain_time_us = int(reply["timestamp"]) * 1_000_000
                rec.reason = None
            elif status == "unknown":
                rec.status, rec.reason = "failed", "service does not know this hash"
            else:
                self._next_try[hx] = self.clock() + self.poll_interval_s
                return rec
            self.proofs.put(rec)
            return rec

    def run_pending(self) -> dict[str, int]:
        """One pass: submit due queued hashes, poll due submitted ones."""
        counts = {"submitted": 0, "confirmed": 0, "errors": 0}
        now = self.clock()
        for hx, rec in sorted(self.proofs.all().items()):
            if self._next_try.get(hx, 0) > now:
                continue
            try:
                if rec.status == "queued" and self.credential is not None:
                    if self.submit_hash(hx).status == "submitted":
                        counts["submitted"] += 1
                elif rec.status == "submitted":
                    if self.poll_proof(hx).status == "confirmed":
                        counts["confirmed"] += 1
            except ServiceUnavailable as e:
                counts["errors"] += 1
                self._next_try[hx] = now + self.poll_interval_s
                log.info("poll %s deferred: %s", hx[:16], e)
        return counts

    def outstanding(self, until: str = "submitted") -> list[str]:
        """Hashes not yet at ``until`` (submitted or confirmed); failed ones excluded."""
        done = {"submitted": ("submitted", "confirmed"), "confirmed": ("confirmed",)}[until]
        return sorted(h for h, r in self.proofs.all().items() if r.status not in done + ("failed",))

    def drain(self, until: str = "submitted", timeout_s: float = 30.0, step_s: float = 0.05) -> bool:
        """Run passes until nothing is outstanding or the timeout expires."""
        deadline = time.monotonic() + timeout_s
        while True:
            self.run_pending()
            if not self.outstanding(until):
                return True
            if time.monotonic() >= deadline:
                return False
            time.sleep(step_s)


class StampWorker(threading.Thread):
    """Background retry/poll loop running alongside recording."""

    def __init__(self, stamper: Stamper, step_s: float = 0.1):
        super().__init__(daemon=True, name="tpsc-stamper")
        self.stamper = stamper
        self.step_s = step_s
        self._stop_evt = threading.Event()

    def run(self) -> None:
        while not self._stop_evt.is_set():
            try:
                self.stamper.run_pending()
            except Exception:
                log.exception("stamper pass failed")
            self._stop_evt.wait(self.step_s)

    def stop(self) -> None:
        self._stop_evt.set()
        self.join(timeout=5)


# -- mock service ----------------------------------------------------------------


@dataclass
class FaultPlan:
    """Injected faults for the mock service.

    error_rate: reply 503 before recording anything.
    drop_rate:  record the submission, then close the connection without replying.
    """

    error_rate: float = 0.0
    drop_rate: float = 0.0
    seed: int = 0
    down: bool = False

    def __post_init__(self):
        self._rng = random.Random(self.seed)
        self._lock = threading.Lock()

    def roll(self) -> str | None:
        with self._lock:
            if self.down:
                return "error"
            x = self._rng.random()
        if x < self.error_rate:
            return "error"
        if x < self.error_rate + self.drop_rate:
            return "drop"
        return None


class MockStampService:
    """In-process test double for the timestamping service.

    Each hash is confirmed ``confirm_delay_s`` after its first submission,
    with tx_id ``"mock-" + hash[:24]``. When ``ledger_path`` is given the
    ledger survives stop/start, which is how tests "kill" and restart it.
    """

    def __init__(self, port: int = 0, confirm_delay_s: float = 0.0, *, host: str = "127.0.0.1",
                 clock: Callable[[], float] = time.time, ledger_path: str | Path | None = None,
                 api_keys: set[str] | None = None, faults: FaultPlan | None = None):
        self.host = host
        self.port = port
        self.confirm_delay_s = confirm_delay_s
        self.clock = clock
        self.ledger_path = Path(ledger_path) if ledger_path else None
        self.api_keys = api_keys
        self.faults = faults or FaultPlan()
        self._lock = threading.Lock()
        self._ledger: dict[str, dict] = {}
        self._server: ThreadingHTTPServer | None = None
        self._thread: threading.Thread | None = None
        if self.ledger_path and self.ledger_path.exists():
            for line in self.ledger_path.read_text().splitlines():
                if line.strip():
                    e = json.loads(line)
                    self._ledger[e["hash"]] = e

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}"

    def ledger(self) -> dict[str, dict]:
        with self._lock:
            return {k: dict(v) for k, v in self._ledger.items()}

    def _record(self, hx: str) -> None:
        with self._lock:
            e = self._ledger.get(hx)
            if e is None:
                e = {"hash": hx, "received_at": self.clock(), "posts": 0}
                self._ledger[hx] = e
            e["posts"] += 1
            if self.ledger_path:
                self.ledger_path.write_text("".join(canonical_json(v) + "\n" for v in self._ledger.values()))

    def _proof(self, hx: str) -> tuple[int, dict]:
        with self._lock:
            e = self._ledger.get(hx)
        if e is None:
            return 404, {"status": "unknown"}
        confirm_at = e["received_at"] + self.confirm_delay_s
        if self.clock() < confirm_at:
            return 200, {"status": "pending"}
        return 200, {"status": "confirmed", "tx_id": "mock-" + hx[:24], "timestamp": int(confirm_at)}

    def start(self) -> "MockStampService":
        service = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, fmt, *args):
                log.debug("mock stamper: " + fmt, *args)

            def _reply(self, code: int, body: dict) -> None:
                data = json.dumps(body).encode()
                self.send_response(code)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def do_POST(self):
                if self.path != "/api/stamp":
                    return self._reply(404, {"status": "not found"})
                fault = service.faults.roll()
                if fault == "error":
                    return self._reply(503, {"status": "unavailable"})
                key = self.headers.get("Authorization", "")
                if not key or (service.api_keys is not None and key not in service.api_keys):
                    return self._reply(401, {"status": "unauthorized"})
                try:
                    n = int(self.headers.get("Content-Length", 0))
                    hx = json.loads(self.rfile.read(n))["hash"]
                    ChunkHash.from_hex(hx)
                except (ValueError, KeyError, TypeError):
                    return self._reply(400, {"status": "bad request"})
                service._record(hx)
                if fault == "drop":
                    self.close_connection = True
                    return
                self._reply(200, {"status": "submitted"})

            def do_GET(self):
                if self.path == "/api/ledger":
                    entries = sorted(service.ledger().values(), key=lambda e: e["hash"])
                    return self._reply(200, {"entries": entries})
                if self.path.startswith("/api/proof/"):
                    if service.faults.roll() == "error":
                        return self._reply(503, {"status": "unavailable"})
                    code, body = service._proof(self.path[len("/api/proof/"):])
                    return self._reply(code, body)
                self._reply(404, {"status": "not found"})

        try:
            self._server = ThreadingHTTPServer((self.host, self.port), Handler)
        except OSError as e:
            raise StamperError(f"cannot start mock service on port {self.port}: {e}") from e
        self._server.daemon_threads = True
        self.port = self._server.server_address[1]
        self._thread = threading.Thread(target=self._server.serve_forever, args=(0.05,), daemon=True,
                                        name="tpsc-mock-stamper")
        self._thread.start()
        return self

    def stop(self) -> None:
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
            self._server = None

    def __enter__(self) -> "MockStampService":
        return self.start() if self._server is None else self

    def __exit__(self, *exc) -> None:
        self.stop()


def run_mock_service(port: int, confirm_delay_s: float, **kw) -> MockStampService:
    return MockStampService(port, confirm_delay_s, **kw).start()
