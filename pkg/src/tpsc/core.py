"""Domain types and the TPC1 chunk format.

Everything here is pure: serialization, parsing and hashing depend only on
their arguments. Integers are big-endian, there is no padding, and a record
is always 19 bytes, so the size of a chunk is a function of its record count.
"""

from __future__ import annotations

import enum
import hashlib
import math
import struct
from dataclasses import dataclass, field

from tpsc.errors import (
    BadMagic,
    ChainError,
    ChunkFormatError,
    NonFiniteValue,
    RecordCountMismatch,
    Truncated,
    UnsupportedVersion,
)

MAGIC = b"TPC1"
VERSION = 1

HEADER_STRUCT = struct.Struct(">4sH16sQ32sQQI")
RECORD_STRUCT = struct.Struct(">HBQd")
HEADER_SIZE = HEADER_STRUCT.size  # 82
RECORD_SIZE = RECORD_STRUCT.size  # 19

ZERO_HASH = bytes(32)
FLAG_SUSPECT = 0x01
_RESERVED_FLAGS = 0xFE

_U16 = 0xFFFF
_U32 = 0xFFFFFFFF
_U64 = 0xFFFFFFFFFFFFFFFF


class SensorKind(str, enum.Enum):
    TEMPERATURE = "temperature"
    CURRENT = "current"
    VIBRATION = "vibration"
    OTHER = "other"


@dataclass(frozen=True)
class SensorDescriptor:
    sensor_id: int
    kind: SensorKind
    unit: str
    model: str
    nominal_interval_us: int

    def __post_init__(self):
        if not 0 <= self.sensor_id <= _U16:
            raise ValueError(f"sensor_id out of range: {self.sensor_id}")
        if self.nominal_interval_us <= 0:
            raise ValueError("nominal_interval_us must be > 0")
        if not isinstance(self.kind, SensorKind):
            object.__setattr__(self, "kind", SensorKind(self.kind))

    def to_dict(self) -> dict:
        return {
            "sensor_id": self.sensor_id,
            "kind": self.kind.value,
            "unit": self.unit,
            "model": self.model,
            "nominal_interval_us": self.nominal_interval_us,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SensorDescriptor":
        return cls(
            sensor_id=int(d["sensor_id"]),
            kind=SensorKind(d["kind"]),
            unit=str(d.get("unit", "")),
            model=str(d.get("model", "")),
            nominal_interval_us=int(d["nominal_interval_us"]),
        )


@dataclass(frozen=True)
class Sample:
    sensor_id: int
    timestamp_us: int
    value: float
    flags: int = 0

    @property
    def suspect(self) -> bool:
        return bool(self.flags & FLAG_SUSPECT)


def sample_problem(s: Sample) -> str | None:
    """Name the first field of ``s`` that cannot go into a chunk, if any."""
    if not isinstance(s.sensor_id, int) or not 0 <= s.sensor_id <= _U16:
        return "sensor_id"
    if not isinstance(s.timestamp_us, int) or not 0 <= s.timestamp_us <= _U64:
        return "timestamp_us"
    if not isinstance(s.value, (int, float)) or not math.isfinite(s.value):
        return "value"
    if not isinstance(s.flags, int) or not 0 <= s.flags <= 0xFF or s.flags & _RESERVED_FLAGS:
        return "flags"
    return None


@dataclass(frozen=True)
class ChunkHash:
    bytes: bytes

    def __post_init__(self):
        if not isinstance(self.bytes, (bytes, bytearray)) or len(self.bytes) != 32:
            raise ValueError("a chunk hash is exactly 32 bytes")
        object.__setattr__(self, "bytes", bytes(self.bytes))

    @property
    def hex(self) -> str:
        return self.bytes.hex()

    @classmethod
    def from_hex(cls, text: str) -> "ChunkHash":
        if len(text) != 64 or text != text.lower():
            raise ValueError(f"not a 64-char lowercase hex digest: {text!r}")
        return cls(bytes.fromhex(text))

    def __str__(self) -> str:
        return self.hex


@dataclass(frozen=True)
class ChunkHeader:
    dataset_id: bytes
    sequence: int
    prev_hash: bytes
    first_ts_us: int
    last_ts_us: int
    record_count: int
    magic: bytes = MAGIC
    version: int = VERSION


@dataclass(frozen=True)
class Chunk:
    header: ChunkHeader
    records: tuple[Sample, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if not isinstance(self.records, tuple):
            object.__setattr__(self, "records", tuple(self.records))

    @property
    def sequence(self) -> int:
        return self.header.sequence


def _check_header(h: ChunkHeader, recs: tuple[Sample, ...]) -> None:
    if h.magic != MAGIC:
        raise ChunkFormatError("magic")
    if h.version != VERSION:
        raise ChunkFormatError("version")
    if not isinstance(h.dataset_id, bytes) or len(h.dataset_id) != 16:
        raise ChunkFormatError("dataset_id")
    if not 0 <= h.sequence <= _U64:
        raise ChunkFormatError("sequence")
    if not isinstance(h.prev_hash, bytes) or len(h.prev_hash) != 32:
        raise ChunkFormatError("prev_hash")
    if (h.sequence == 0) != (h.prev_hash == ZERO_HASH):
        raise ChunkFormatError("prev_hash")
    if not recs:
        raise ChunkFormatError("records")
    if h.record_count != len(recs) or h.record_count > _U32:
        raise ChunkFormatError("record_count")


def _check_order(h: ChunkHeader, recs: tuple[Sample, ...]) -> None:
    if any(a.timestamp_us > b.timestamp_us for a, b in zip(recs, recs[1:])):
        raise ChunkFormatError("records")
    if h.first_ts_us != recs[0].timestamp_us:
        raise ChunkFormatError("first_ts_us")
    if h.last_ts_us != recs[-1].timestamp_us:
        raise ChunkFormatError("last_ts_us")


def check_chunk(chunk: Chunk) -> None:
    """Raise ChunkFormatError naming the first violated field."""
    h, recs = chunk.header, chunk.records
    _check_header(h, recs)
    for s in recs:
        bad = sample_problem(s)
        if bad:
            raise ChunkFormatError(f"records.{bad}")
    _check_order(h, recs)


def serialize_chunk(chunk: Chunk) -> bytes:
    check_chunk(chunk)
    h = chunk.header
    parts = [
        HEADER_STRUCT.pack(
            h.magic, h.version, h.dataset_id, h.sequence, h.prev_hash,
            h.first_ts_us, h.last_ts_us, h.record_count,
        )
    ]
    pack = RECORD_STRUCT.pack
    parts.extend(pack(s.sensor_id, s.flags, s.timestamp_us, float(s.value)) for s in chunk.records)
    return b"".join(parts)


def parse_chunk(data: bytes) -> Chunk:
    data = bytes(data)
    if len(data) < 4:
        raise Truncated(len(data), HEADER_SIZE)
    if data[:4] != MAGIC:
        raise BadMagic(data[:4])
    if len(data) < HEADER_SIZE:
        raise Truncated(len(data), HEADER_SIZE)
    magic, version, dataset_id, seq, prev, first, last, count = HEADER_STRUCT.unpack_from(data)
    if version != VERSION:
        raise UnsupportedVersion(version)
    expected = HEADER_SIZE + RECORD_SIZE * count
    if len(data) < expected:
        raise Truncated(len(data), expected)
    if len(data) > expected:
        raise RecordCountMismatch(count, (len(data) - HEADER_SIZE) / RECORD_SIZE)
    records = []
    reserved = False
    for i, (sid, flags, ts, value) in enumerate(RECORD_STRUCT.iter_unpack(data[HEADER_SIZE:])):
        if not math.isfinite(value):
            raise NonFiniteValue(i)
        reserved |= bool(flags & _RESERVED_FLAGS)
        records.append(Sample(sid, ts, value, flags))
    # unpacked fields are in range by construction; only flags, order and header remain
    recs = tuple(records)
    header = ChunkHeader(dataset_id, seq, prev, first, last, count, magic, version)
    _check_header(header, recs)
    if reserved:
        raise ChunkFormatError("records.flags")
    _check_order(header, recs)
    return Chunk(header, recs)


def hash_chunk(chunk_bytes: bytes) -> ChunkHash:
    if not chunk_bytes:
        raise ValueError("cannot hash an empty byte sequence")
    return ChunkHash(hashlib.sha256(chunk_bytes).digest())


def link_header(prev: ChunkHash | None, sequence: int) -> bytes:
    """Return the prev_hash field for a chunk at ``sequence``.

    The genesis chunk (sequence 0) carries 32 zero bytes; every later chunk
    carries the hash of its predecessor's serialized bytes.
    """
    if sequence < 0:
        raise ChainError(f"negative sequence {sequence}")
    if sequence == 0:
        if prev is not None:
            raise ChainError("genesis chunk cannot reference a previous chunk")
        return ZERO_HASH
    if prev is None:
        raise ChainError(f"chunk {sequence} needs the previous chunk's hash")
    return prev.bytes


def build_chunk(dataset_id: bytes, sequence: int, prev: ChunkHash | None, records) -> Chunk:
    """Assemble a sealed chunk; records are stably sorted by timestamp."""
    recs = tuple(sorted(records, key=lambda s: s.timestamp_us))
    if not recs:
        raise ChunkFormatError("records")
    header = ChunkHeader(
        dataset_id=dataset_id,
        sequence=sequence,
        prev_hash=link_header(prev, sequence),
        first_ts_us=recs[0].timestamp_us,
        last_ts_us=recs[-1].timestamp_us,
        record_count=len(recs),
    )
    return Chunk(header, recs)
