"""Tamper-evident recording of sensor time series.

Samples are sealed into hash-chained chunks, chunk hashes are anchored at a
trusted-timestamping service, chunks live in a content-addressed store, and
an independent verifier localizes any later modification.
"""

__version__ = "0.1.0"

from tpsc.core import (  # noqa: E402
    Chunk,
    ChunkHash,
    ChunkHeader,
    Sample,
    SensorDescriptor,
    SensorKind,
    hash_chunk,
    link_header,
    parse_chunk,
    serialize_chunk,
)

__all__ = [
    "Chunk",
    "ChunkHash",
    "ChunkHeader",
    "Sample",
    "SensorDescriptor",
    "SensorKind",
    "hash_chunk",
    "link_header",
    "parse_chunk",
    "serialize_chunk",
]
