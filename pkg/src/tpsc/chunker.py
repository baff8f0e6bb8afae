"""Buffering, sealing and the crash-recovery journal.

A chunk is sealed right after the append that brings the buffered payload to
at least ``size_threshold`` bytes, or once the time window opened by the
first buffered sample has run out. Every seal of either kind resets the
window. Empty chunks are never produced.

The journal is an append-only text file: a header comment naming the
dataset, line-protocol sample lines (flags column included), and
``SEAL <seq> <hash-hex>`` markers. Samples after the last marker are the
unsealed buffer.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from tpsc.core import (
    RECORD_SIZE,
    Chunk,
    ChunkHash,
    Sample,
    build_chunk,
    hash_chunk,
    sample_problem,
    serialize_chunk,
)
from tpsc.errors import JournalCorrupt, LineRejected
from tpsc.ingest import format_line, parse_line

log = logging.getLogger(__name__)

CHUNK_SIZE_THRESHOLD = 262_144
DEFAULT_INTERVAL_US = 300_000_000
SYNC_BATCH = 64
_HEADER_PREFIX = "# tpsc journal dataset="


@dataclass(frozen=True)
class FlushPolicy:
    size_threshold: int = CHUNK_SIZE_THRESHOLD
    interval_us: int | None = DEFAULT_INTERVAL_US

    def __post_init__(self):
        if self.size_threshold <= 0:
            raise ValueError("size_threshold must be > 0")
        if self.interval_us is not None and self.interval_us <= 0:
            raise ValueError("interval_us must be > 0 or None")


@dataclass
class ChainState:
    dataset_id: bytes
    next_sequence: int = 0
    last_hash: ChunkHash | None = None
    buffer: list[Sample] = field(default_factory=list)
    buffer_opened_at_us: int | None = None
    rejected: int = 0

    def __post_init__(self):
        if (self.next_sequence == 0) != (self.last_hash is None):
            raise ValueError("next_sequence 0 iff no last_hash")

    @property
    def payload_bytes(self) -> int:
        return RECORD_SIZE * len(self.buffer)


@dataclass(frozen=True)
class SealedChunk:
    chunk: Chunk
    data: bytes
    hash: ChunkHash

    @property
    def sequence(self) -> int:
        return self.chunk.header.sequence


def _seal(state: ChainState) -> SealedChunk:
    chunk = build_chunk(state.dataset_id, state.next_sequence, state.last_hash, state.buffer)
    data = serialize_chunk(chunk)
    h = hash_chunk(data)
    state.next_sequence += 1
    state.last_hash = h
    state.buffer = []
    state.buffer_opened_at_us = None
    return SealedChunk(chunk, data, h)


def _due(state: ChainState, policy: FlushPolicy, now_us: int) -> bool:
    if not state.buffer:
        return False
    if state.payload_bytes >= policy.size_threshold:
        return True
    return (
        policy.interval_us is not None
        and state.buffer_opened_at_us is not None
        and now_us - state.buffer_opened_at_us >= policy.interval_us
    )


def append_sample(state: ChainState, s: Sample, policy: FlushPolicy,
                  now_us: int | None = None) -> tuple[ChainState, SealedChunk | None]:
    """Append ``s`` and seal if the policy says so.

    ``state`` is updated in place and returned. ``now_us`` is the arrival
    time; it defaults to the sample timestamp (logical clock).
    """
    if sample_problem(s):
        state.rejected += 1
        return state, None
    now = s.timestamp_us if now_us is None else now_us
    if not state.buffer:
        state.buffer_opened_at_us = now
    state.buffer.append(s)
    if _due(state, policy, now):
        return state, _seal(state)
    return state, None


def expire(state: ChainState, policy: FlushPolicy, now_us: int) -> tuple[ChainState, SealedChunk | None]:
    """Seal on time expiry alone, with no new sample."""
    if _due(state, policy, now_us):
        return state, _seal(state)
    return state, None


def seal_now(state: ChainState) -> tuple[ChainState, SealedChunk | None]:
    if not state.buffer:
        return state, None
    return state, _seal(state)


# -- journal -----------------------------------------------------------------


@dataclass
class Recovered:
    state: ChainState
    valid_bytes: int
    seals: list[tuple[int, str]]
    torn: bool = False


def _scan(path: Path, dataset_id: bytes | None = None) -> Recovered:
    raw = path.read_bytes() if path.exists() else b""
    if not raw:
        if dataset_id is None:
            raise JournalCorrupt(0, "empty journal and no dataset id given")
        return Recovered(ChainState(dataset_id), 0, [])

    lines = raw.split(b"\n")
    tail = lines.pop()  # bytes after the last newline; non-empty means torn
    offset = 0
    state: ChainState | None = None
    seals: list[tuple[int, str]] = []
    torn = False

    for idx, line_b in enumerate(lines):
        start = offset
        offset += len(line_b) + 1
        last = idx == len(lines) - 1 and not tail
        try:
            text = line_b.decode("ascii")
        except UnicodeDecodeError:
            if last:
                torn = True
                offset = start
                break
            raise JournalCorrupt(start, "non-ASCII bytes") from None

        if state is None:
            if not text.startswith(_HEADER_PREFIX):
                raise JournalCorrupt(start, "missing journal header")
            try:
                did = bytes.fromhex(text[len(_HEADER_PREFIX):].strip())
            except ValueError:
                raise JournalCorrupt(start, "bad dataset id in header") from None
            if len(did) != 16 or (dataset_id is not None and did != dataset_id):
                raise JournalCorrupt(start, "journal belongs to another dataset")
            state = ChainState(did)
            continue

        try:
            if text.startswith("SEAL "):
                _apply_seal(state, text, seals)
            else:
                s = parse_line(text)
                if s is not None:
                    state.buffer.append(s)
        except (LineRejected, ValueError) as e:
            if last:
                torn = True
                offset = start
                break
            raise JournalCorrupt(start, str(e)) from None

    if tail:
        torn = True
    if state is None:
        if dataset_id is None:
            raise JournalCorrupt(0, "journal header is torn")
        state, offset, torn = ChainState(dataset_id), 0, True
    if torn:
        log.warning("journal %s: discarded torn final record after byte %d", path, offset)
    if state.buffer:
        state.buffer_opened_at_us = state.buffer[0].timestamp_us
    return Recovered(state, offset, seals, torn)


def _apply_seal(state: ChainState, text: str, seals: list) -> None:
    parts = text.split()
    if len(parts) != 3:
        raise ValueError(f"malformed seal marker {text!r}")
    seq, hex_ = int(parts[1]), parts[2]
    h = ChunkHash.from_hex(hex_)
    if seq != state.next_sequence:
        raise ValueError(f"seal sequence {seq}, expected {state.next_sequence}")
    if state.buffer:
        got = _seal(state).hash
        if got != h:
            raise ValueError(f"seal {seq} hash does not match journaled samples")
    else:
        # compacted journal: marker without its samples
        state.next_sequence += 1
        state.last_hash = h
    seals.append((seq, hex_))


def recover(journal_path: str | Path, dataset_id: bytes | None = None) -> ChainState:
    """Rebuild chain position and buffer from a journal."""
    return _scan(Path(journal_path), dataset_id).state


class Journal:
    """Append-only writer. Lines reach the OS immediately; fsync every batch."""

    def __init__(self, path: str | Path, dataset_id: bytes, *, sync_batch: int = SYNC_BATCH,
                 fsync: bool = True):
        self.path = Path(path)
        self.dataset_id = dataset_id
        self.sync_batch = sync_batch
        self.fsync = fsync
        self.recovered = _scan(self.path, dataset_id)
        with open(self.path, "ab") as fh:
            fh.truncate(self.recovered.valid_bytes)
        self._fh = open(self.path, "a", encoding="ascii", newline="\n")
        if self.recovered.valid_bytes == 0:
            self._fh.write(f"{_HEADER_PREFIX}{dataset_id.hex()}\n")
            self._flush(force=True)
        self._pending = 0

    @property
    def state(self) -> ChainState:
        return self.recovered.state

    def _flush(self, force: bool = False) -> None:
        self._fh.flush()
        if self.fsync and force:
            os.fsync(self._fh.fileno())

    def append(self, s: Sample) -> None:
        self._fh.write(format_line(s) + "\n")
        self._pending += 1
        self._flush(force=self._pending >= self.sync_batch)
        if self._pending >= self.sync_batch:
            self._pending = 0

    def seal(self, sequence: int, h: ChunkHash) -> None:
        self._fh.write(f"SEAL {sequence} {h.hex}\n")
        self._pending = 0
        self._flush(force=True)

    def compact(self, state: ChainState, seals: list[tuple[int, str]]) -> None:
        """Rewrite as header + seal markers + unsealed buffer, atomically."""
        tmp = self.path.with_suffix(".tmp")
        with open(tmp, "w", encoding="ascii", newline="\n") as fh:
            fh.write(f"{_HEADER_PREFIX}{self.dataset_id.hex()}\n")
            for seq, hex_ in seals:
                fh.write(f"SEAL {seq} {hex_}\n")
            for s in state.buffer:
                fh.write(format_line(s) + "\n")
            fh.flush()
            os.fsync(fh.fileno())
        self._fh.close()
        os.replace(tmp, self.path)
        self._fh = open(self.path, "a", encoding="ascii", newline="\n")

    def close(self) -> None:
        if not self._fh.closed:
            self._flush(force=True)
            self._fh.close()


class Chunker:
    """Single-writer owner of a ChainState, journaled.

    ``persist`` runs for each sealed chunk before its SEAL marker is written;
    sealed chunks are then returned to the caller in sequence order.
    """

    def __init__(self, journal: Journal, policy: FlushPolicy,
                 persist: Callable[[SealedChunk], None] | None = None):
        self.journal = journal
        self.policy = policy
        self.persist = persist
        self.state = journal.state
        self.seals = list(journal.recovered.seals)

    def _record(self, sealed: SealedChunk | None) -> SealedChunk | None:
        if sealed is not None:
            # the object must be durable before the journal claims the seal
            if self.persist:
                self.persist(sealed)
            self.journal.seal(sealed.sequence, sealed.hash)
            self.seals.append((sealed.sequence, sealed.hash.hex))
        return sealed

    def append(self, s: Sample, now_us: int | None = None) -> SealedChunk | None:
        if sample_problem(s):
            self.state.rejected += 1
            return None
        self.journal.append(s)
        _, sealed = append_sample(self.state, s, self.policy, now_us)
        return self._record(sealed)

    def pending_seal(self, now_us: int | None = None) -> SealedChunk | None:
        """Seal a buffer that was already due (e.g. right after recovery)."""
        if now_us is None:
            if self.state.payload_bytes < self.policy.size_threshold:
                return None
            now_us = 0
        return self._record(expire(self.state, self.policy, now_us)[1])

    def seal_now(self) -> SealedChunk | None:
        return self._record(seal_now(self.state)[1])

    def close(self, compact: bool = True) -> None:
        if compact:
            self.journal.compact(self.state, self.seals)
        self.journal.close()
