"""Shared builders for the test suite."""

from __future__ import annotations

import hashlib
import json
import random
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from tpsc.core import Sample, SensorDescriptor, SensorKind, build_chunk, hash_chunk, serialize_chunk
from tpsc.manifest import ChunkEntry, DatasetManifest, compute_manifest_hash, save_manifest
from tpsc.stamper import ProofRecord, ProofStore
from tpsc.store import ObjectStore

DATASET_ID = bytes.fromhex("00112233445566778899aabbccddeeff")
T0 = 1_700_000_000_000_000


def samples(n: int, sensor_id: int = 1, start_us: int = T0, step_us: int = 1_000_000,
            seed: int | None = None) -> list[Sample]:
    rng = random.Random(seed)
    return [Sample(sensor_id, start_us + i * step_us,
                   20.0 + (rng.gauss(0, 1) if seed is not None else i * 0.01))
            for i in range(n)]


def build_dataset(root: Path, n_chunks: int = 10, per_chunk: int = 20, *,
                  proof_status: str = "confirmed", finalized: bool = True,
                  seed: int = 0) -> DatasetManifest:
    """Write a dataset directory directly through the library primitives."""
    root = Path(root)
    store = ObjectStore(root)
    prev = None
    entries = []
    rng = random.Random(seed)
    t = T0
    for seq in range(n_chunks):
        recs = []
        for _ in range(per_chunk):
            recs.append(Sample(1, t, rng.uniform(15, 25)))
            t += 1_000_000
        chunk = build_chunk(DATASET_ID, seq, prev, recs)
        data = serialize_chunk(chunk)
        h = hash_chunk(data)
        store.put(data)
        entries.append(ChunkEntry(seq, h.hex, recs[0].timestamp_us, recs[-1].timestamp_us, len(recs)))
        prev = h
    m = DatasetManifest(
        dataset_id=DATASET_ID.hex(),
        creator_key_id="0123456789abcdef",
        sensors=[SensorDescriptor(1, SensorKind.TEMPERATURE, "C", "sim", 1_000_000)],
        metadata={"description": "test"},
        chunks=entries,
    )
    if finalized:
        m.finalized = True
        m.manifest_hash = compute_manifest_hash(m)
    save_manifest(root / "manifest.json", m)
    proofs = ProofStore(root / "proofs.jsonl")
    hashes = [e.hash for e in entries] + ([m.manifest_hash] if finalized else [])
    for hx in hashes:
        rec = ProofRecord(hx, T0, "http://mock", status=proof_status, attempts=1)
        if proof_status == "confirmed":
            rec.tx_id, rec.blockchain_time_us = "mock-" + hx[:24], T0 + 60_000_000
        proofs.put(rec)
    return m


def sim_config(dataset_id: str | None = "00112233445566778899aabbccddeeff", *,
               url: str = "http://127.0.0.1:9", interval_s: float = 60,
               extra_sensors: list | None = None) -> dict:
    sensors = [
        {"sensor_id": 1, "kind": "temperature", "unit": "C", "model": "sim-t",
         "sim": {"baseline": 20, "amplitude": 2, "noise_sd": 0.1, "seed": 1}},
        {"sensor_id": 2, "kind": "current", "unit": "A", "model": "sim-i",
         "sim": {"baseline": 5, "amplitude": 1, "noise_sd": 0.2, "seed": 2}},
    ] + (extra_sensors or [])
    return {
        "dataset": {"id": dataset_id, "description": "test run", "location": "lab"},
        "sensors": sensors,
        "chunker": {"clock": "logical", "chunk_interval_s": interval_s, "start_us": T0},
        "stamper": {"url": url, "poll_interval_s": 0.02, "retry_base_s": 0.02,
                    "retry_cap_s": 0.2, "timeout_s": 2.0, "drain_timeout_s": 10.0},
    }


def write_config(path: Path, cfg: dict) -> Path:
    path.write_text(json.dumps(cfg))
    return path


class StubGateway:
    """IPFS-style add endpoint; replies with a fake CID derived from the body."""

    def __init__(self):
        self.fail = False
        self.uploads = 0
        gw = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *a):
                pass

            def do_POST(self):
                body = self.rfile.read(int(self.headers["Content-Length"]))
                if gw.fail:
                    self.send_response(503)
                    self.end_headers()
                    return
                gw.uploads += 1
                assert self.path == "/api/v0/add"
                assert b'name="file"' in body
                reply = json.dumps({"Name": "chunk", "Hash": "Qm" + hashlib.sha256(body).hexdigest()[:20]}).encode()
                self.send_response(200)
                self.send_header("Content-Length", str(len(reply)))
                self.end_headers()
                self.wfile.write(reply)

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.server.server_address[1]}"
        threading.Thread(target=self.server.serve_forever, args=(0.05,), daemon=True).start()

    def close(self):
        self.server.shutdown()
        self.server.server_close()


# criterion number -> (passed, title, detail, seconds); filled by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str, str, float]] = {}
