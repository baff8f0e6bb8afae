"""Dataset directories and the recording pipeline.

Layout of one dataset directory::

    manifest.json   chunk index and metadata
    proofs.jsonl    proof records, one JSON object per line
    journal.log     crash-recovery journal
    objects/        content-addressed chunk store
    pins.jsonl      address -> remote content id (only with a remote gateway)
    .lock           held by the process that writes the dataset

Crash ordering on seal: object stored, then SEAL marker journaled, then the
manifest updated, then the hash queued for stamping. Opening a dataset
replays whatever a crash left behind in that order.
"""

from __future__ import annotations

import fcntl
import logging
import secrets
import sys
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import TextIO

from tpsc.chunker import Chunker, Journal, SealedChunk
from tpsc.config import Config
from tpsc.core import parse_chunk
from tpsc.errors import DatasetError
from tpsc.ingest import LineSource, Source, open_source, run_scheduler
from tpsc.manifest import ChunkEntry, DatasetManifest, compute_manifest_hash, load_manifest, save_manifest
from tpsc.stamper import (
    CreatorCredential,
    HttpStampClient,
    OriginStampClient,
    ProofStore,
    Stamper,
    load_proofs,
)
from tpsc.store import GatewayClient, ObjectStore, Pinner

log = logging.getLogger(__name__)


class DatasetDir:
    def __init__(self, path: str | Path):
        self.path = Path(path)

    manifest_path = property(lambda self: self.path / "manifest.json")
    proofs_path = property(lambda self: self.path / "proofs.jsonl")
    journal_path = property(lambda self: self.path / "journal.log")
    pins_path = property(lambda self: self.path / "pins.jsonl")
    lock_path = property(lambda self: self.path / ".lock")

    @property
    def store(self) -> ObjectStore:
        return ObjectStore(self.path)

    def has_manifest(self) -> bool:
        return self.manifest_path.is_file()

    def manifest(self) -> DatasetManifest:
        if not self.has_manifest():
            raise DatasetError(f"{self.path}: no manifest.json")
        return load_manifest(self.manifest_path)

    def proofs(self):
        return load_proofs(self.proofs_path)

    @contextmanager
    def locked(self):
        self.path.mkdir(parents=True, exist_ok=True)
        fh = open(self.lock_path, "a+")
        try:
            fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            fh.close()
            raise DatasetError(f"{self.path} is in use by another process") from None
        try:
            yield self
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)
            fh.close()


def make_stamper(cfg: dict, proofs: ProofStore, credential: CreatorCredential | None) -> Stamper:
    if cfg.get("backend") == "originstamp":
        client = OriginStampClient(cfg["url"], timeout=cfg["timeout_s"])
    else:
        client = HttpStampClient(cfg["url"], timeout=cfg["timeout_s"])
    return Stamper(proofs, client, credential,
                   retry_base_s=cfg["retry_base_s"], retry_cap_s=cfg["retry_cap_s"],
                   poll_interval_s=cfg["poll_interval_s"])


@dataclass
class RecordSummary:
    dataset_id: str
    chunks_sealed: int = 0
    samples: int = 0
    rejected: int = 0
    total_chunks: int = 0
    unsubmitted: list[str] = field(default_factory=list)


class Pipeline:
    """Owns a dataset directory while recording or finalizing.

    ``open`` recovers and reconciles; ``close`` seals what is buffered,
    drains the stamper queue and compacts the journal and proofs file.
    """

    def __init__(self, dataset: DatasetDir, config: Config, *, stamp: bool = True,
                 credential: CreatorCredential | None = None):
        self.ds = dataset
        self.config = config
        self.stamp = stamp and bool(config.stamper.get("enabled", True))
        self.credential = credential
        if self.stamp and credential is None:
            raise DatasetError("stamping is enabled but TPSC_API_KEY is not set (or pass --no-stamp)")
        self.store = dataset.store
        self.manifest: DatasetManifest | None = None
        self.chunker: Chunker | None = None
        self.stamper: Stamper | None = None
        self.pinner: Pinner | None = None
        self.summary: RecordSummary | None = None
        self._lock_cm = None
        self._bg: threading.Thread | None = None
        self._bg_stop = threading.Event()
        self._mutex = threading.Lock()

    # -- lifecycle -----------------------------------------------------------------

    def open(self, *, allow_finalized: bool = False) -> "Pipeline":
        self._lock_cm = self.ds.locked()
        self._lock_cm.__enter__()
        try:
            self._open()
        except BaseException:
            self._lock_cm.__exit__(None, None, None)
            raise
        if self.manifest.finalized and not allow_finalized:
            self.chunker.close(compact=False)
            self._lock_cm.__exit__(None, None, None)
            raise DatasetError(f"{self.ds.path} is finalized; recording into it is refused")
        return self

    def _open(self) -> None:
        cfg = self.config
        if self.ds.has_manifest():
            m = self.ds.manifest()
            want = cfg.dataset.get("id")
            if want and want != m.dataset_id:
                raise DatasetError(f"config dataset.id {want} does not match {m.dataset_id}")
            have = {d.sensor_id: d for d in m.sensors}
            for d in cfg.descriptors:
                if d.sensor_id in have and have[d.sensor_id] != d:
                    raise DatasetError(f"sensor {d.sensor_id} descriptor differs from the dataset's")
                if d.sensor_id not in have:
                    if m.finalized:
                        raise DatasetError("cannot add sensors to a finalized dataset")
                    m.sensors.append(d)
        else:
            m = DatasetManifest(
                dataset_id=cfg.dataset.get("id") or secrets.token_hex(16),
                creator_key_id=self.credential.key_id if self.credential else "",
                sensors=list(cfg.descriptors),
                metadata={k: cfg.dataset.get(k, "") for k in ("description", "location")},
            )
            self.ds.path.mkdir(parents=True, exist_ok=True)
            save_manifest(self.ds.manifest_path, m)
        if self.credential and not m.creator_key_id and not m.finalized:
            m.creator_key_id = self.credential.key_id
        self.manifest = m
        did = bytes.fromhex(m.dataset_id)
        self.summary = RecordSummary(m.dataset_id)

        journal = Journal(self.ds.journal_path, did)
        self.chunker = Chunker(journal, cfg.policy, persist=self._persist)
        self._reconcile()

        if self.stamp:
            self.stamper = make_stamper(cfg.stamper, ProofStore(self.ds.proofs_path), self.credential)
            for e in m.chunks:
                self.stamper.enqueue(e.hash)
            if m.manifest_hash:
                self.stamper.enqueue(m.manifest_hash)
        gw = cfg.store.get("remote_gateway")
        if gw:
            self.pinner = Pinner(self.store, GatewayClient(gw), self.ds.pins_path,
                                 cfg.stamper["retry_base_s"], cfg.stamper["retry_cap_s"])
            for e in m.chunks:
                self.pinner.enqueue(e.hash)

        if not m.finalized:
            sealed = self.chunker.pending_seal()
            if sealed:
                self._after_seal(sealed)

    def _reconcile(self) -> None:
        m = self.manifest
        seals = self.chunker.seals
        if len(m.chunks) > len(seals):
            raise DatasetError(
                f"manifest lists {len(m.chunks)} chunks but the journal only knows {len(seals)}")
        for (seq, hx), e in zip(seals, m.chunks):
            if e.hash != hx:
                raise DatasetError(f"manifest and journal disagree on chunk {seq}")
        for seq, hx in seals[len(m.chunks):]:
            if m.finalized:
                raise DatasetError("journal has chunks beyond a finalized manifest")
            data = self.store.get(hx)
            log.warning("adding chunk %d to manifest after an interrupted seal", seq)
            m.chunks.append(self._entry(parse_chunk(data), hx))
            save_manifest(self.ds.manifest_path, m)

    @staticmethod
    def _entry(chunk, hx: str) -> ChunkEntry:
        h = chunk.header
        return ChunkEntry(h.sequence, hx, h.first_ts_us, h.last_ts_us, h.record_count)

    def _persist(self, sealed: SealedChunk) -> None:
        got = self.store.put(sealed.data)
        if got != sealed.hash:
            raise DatasetError("store address differs from chunk hash")

    def _after_seal(self, sealed: SealedChunk) -> None:
        m = self.manifest
        m.chunks.append(self._entry(sealed.chunk, sealed.hash.hex))
        save_manifest(self.ds.manifest_path, m)
        if self.stamper:
            self.stamper.enqueue(sealed.hash)
        if self.pinner:
            self.pinner.enqueue(sealed.hash.hex)
        self.summary.chunks_sealed += 1

    def start_background(self, step_s: float = 0.05) -> None:
        if not (self.stamper or self.pinner):
            return

        def loop():
            while not self._bg_stop.is_set():
                try:
                    if self.stamper:
                        self.stamper.run_pending()
                    if self.pinner:
                        self.pinner.retry_due()
                except Exception:
                    log.exception("background pass failed")
                self._bg_stop.wait(step_s)

        self._bg = threading.Thread(target=loop, daemon=True, name="tpsc-background")
        self._bg.start()

    def on_sample(self, s, now_us: int | None = None) -> None:
        with self._mutex:
            self.summary.samples += 1
            sealed = self.chunker.append(s, now_us)
            if sealed:
                self._after_seal(sealed)

    def on_idle(self, now_us: int) -> None:
        with self._mutex:
            sealed = self.chunker.pending_seal(now_us)
            if sealed:
                self._after_seal(sealed)

    def close(self, *, drain_until: str = "submitted", drain_timeout_s: float | None = None) -> RecordSummary:
        try:
            with self._mutex:
                if not self.manifest.finalized:
                    sealed = self.chunker.seal_now()
                    if sealed:
                        self._after_seal(sealed)
            self._bg_stop.set()
            if self._bg:
                self._bg.join(timeout=5)
            if self.stamper:
                timeout = self.config.stamper["drain_timeout_s"] if drain_timeout_s is None else drain_timeout_s
                if not self.stamper.drain(drain_until, timeout):
                    left = self.stamper.outstanding(drain_until)
                    log.warning("%d hash(es) still %s; they stay queued for the next run",
                                len(left), "unsubmitted" if drain_until == "submitted" else "unconfirmed")
                self.summary.unsubmitted = self.stamper.outstanding("submitted")
                self.stamper.proofs.compact()
            if self.pinner:
                self.pinner.retry_due()
                ids = self.pinner.mapping()
                if not self.manifest.finalized:
                    for e in self.manifest.chunks:
                        e.remote_id = ids.get(e.hash, e.remote_id)
            if not self.manifest.finalized:
                save_manifest(self.ds.manifest_path, self.manifest)
            self.summary.rejected = self.chunker.state.rejected
            self.summary.total_chunks = len(self.manifest.chunks)
            self.chunker.close()
        finally:
            self._lock_cm.__exit__(None, None, None)
        return self.summary


def build_sources(config: Config, start_us: int, end_us: int | None,
                  line_stream: TextIO | None = None) -> list[Source]:
    sources: list[Source] = []
    live_ids = []
    for sc in config.sources:
        if sc.mode == "line_protocol":
            live_ids.append(sc.descriptor.sensor_id)
        else:
            sources.append(open_source(sc, start_us, end_us))
    if live_ids:
        if line_stream is None:
            where = config.raw["ingest"].get("line_source", "-")
            line_stream = sys.stdin if where == "-" else open(where, encoding="ascii")
        sources.append(LineSource(line_stream, live_ids))
    return sources


def _resume_point(manifest: DatasetManifest, chunker: Chunker) -> int | None:
    last = None
    if manifest.chunks:
        last = manifest.chunks[-1].last_ts_us
    if chunker.state.buffer:
        b = max(s.timestamp_us for s in chunker.state.buffer)
        last = b if last is None else max(last, b)
    return last


def record(dataset_dir: str | Path, config: Config, *, duration_s: float | None = None,
           stamp: bool = True, credential: CreatorCredential | None = None,
           stop: threading.Event | None = None, line_stream: TextIO | None = None) -> RecordSummary:
    """Run ingest -> chunker -> store + stamper until sources end or ``stop`` is set."""
    pipe = Pipeline(DatasetDir(dataset_dir), config, stamp=stamp, credential=credential).open()
    stop = stop or threading.Event()
    try:
        start_us = config.chunker.get("start_us")
        if start_us is None:
            start_us = time.time_ns() // 1000
        resume = _resume_point(pipe.manifest, pipe.chunker)
        if resume is not None and resume >= start_us:
            # continue after what is already recorded
            intervals = [sc.descriptor.nominal_interval_us for sc in config.sources] or [1]
            start_us = resume + min(intervals)
        end_us = None if duration_s is None else start_us + int(duration_s * 1_000_000)
        sources = build_sources(config, start_us, end_us, line_stream)
        if not config.logical_clock and duration_s is not None:
            threading.Timer(duration_s, stop.set).start()
        pipe.start_background()

        if config.logical_clock:
            sink = pipe.on_sample
        else:
            def sink(s):
                pipe.on_sample(s, time.time_ns() // 1000)

        idle = None if config.logical_clock else (lambda: pipe.on_idle(time.time_ns() // 1000))
        summary = run_scheduler(sources, sink, realtime=not config.logical_clock, stop=stop, idle=idle)
        for src in sources:
            src.close()
        pipe.summary.rejected += summary.rejected
    finally:
        out = pipe.close()
    return out


def finalize(dataset_dir: str | Path, config: Config, *, stamp: bool = True,
             credential: CreatorCredential | None = None, wait_s: float = 0.0) -> tuple[bool, DatasetManifest]:
    """Seal leftovers, freeze the manifest and stamp its hash.

    Returns (changed, manifest); a second call changes nothing.
    """
    ds = DatasetDir(dataset_dir)
    if not ds.has_manifest():
        raise DatasetError(f"{ds.path}: no manifest.json")
    pipe = Pipeline(ds, config, stamp=stamp, credential=credential).open(allow_finalized=True)
    changed = False
    try:
        m = pipe.manifest
        if not m.finalized:
            with pipe._mutex:
                sealed = pipe.chunker.seal_now()
                if sealed:
                    pipe._after_seal(sealed)
            m.finalized = True
            m.manifest_hash = compute_manifest_hash(m)
            save_manifest(ds.manifest_path, m)
            changed = True
            if pipe.stamper:
                pipe.stamper.enqueue(m.manifest_hash)
    finally:
        pipe.close(drain_until="confirmed" if wait_s > 0 else "submitted",
                   drain_timeout_s=wait_s if wait_s > 0 else None)
    return changed, pipe.manifest


def stamp_pending(dataset_dir: str | Path, config: Config, credential: CreatorCredential,
                  wait_s: float = 0.0) -> dict[str, int]:
    """Queue every unstamped hash of a dataset and push it to the service."""
    ds = DatasetDir(dataset_dir)
    pipe = Pipeline(ds, config, stamp=True, credential=credential).open(allow_finalized=True)
    pipe.close(drain_until="confirmed" if wait_s > 0 else "submitted",
               drain_timeout_s=wait_s if wait_s > 0 else None)
    counts: dict[str, int] = {}
    for r in ds.proofs().values():
        counts[r.status] = counts.get(r.status, 0) + 1
    return counts


def iter_dataset_samples(dataset_dir: str | Path):
    """Yield every sample of a dataset in chunk order, verifying each object."""
    ds = DatasetDir(dataset_dir)
    store = ds.store
    for e in ds.manifest().chunks:
        yield from parse_chunk(store.get(e.hash)).records
