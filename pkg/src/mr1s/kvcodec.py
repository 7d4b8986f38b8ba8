"""Key-value record codec, hashing, routing and bucket layout.

Record: header (key_len, val_len) as little-endian u32, then key, then value.
This is the format of buckets, combine runs, checkpoint images and result
files.

Bucket layout inside the Key-Value window:

    [control u64][records ...][free ...][next_disp u64][next_cap u64]

control bits 0..61 hold the committed record bytes, bit 62 says a successor
bucket is linked, bit 63 is the seal. The successor link occupies the last
16 bytes of the bucket.
"""

from __future__ import annotations

import logging
import struct
from collections.abc import Iterable, Iterator
from dataclasses import dataclass

logger = logging.getLogger(__name__)

HEADER = struct.Struct("<II")
HEADER_SIZE = HEADER.size
LENGTH_LIMIT = 1 << 32

FNV_OFFSET_BASIS = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MASK64 = (1 << 64) - 1

CONTROL_SIZE = 8
LINK = struct.Struct("<QQ")
LINK_SIZE = LINK.size
BUCKET_OVERHEAD = CONTROL_SIZE + LINK_SIZE
MIN_BUCKET_SIZE = 64

SEAL_BIT = 1 << 63
NEXT_BIT = 1 << 62
COMMITTED_MASK = NEXT_BIT - 1


class CodecError(Exception):
    """Base exception for record codec errors."""


class EncodingError(CodecError):
    """Record cannot be encoded."""


class CorruptionError(CodecError):
    """Bytes do not frame into well-formed records."""


@dataclass(frozen=True)
class KvRecord:
    key: bytes
    value: bytes


def encode_record(key: bytes, value: bytes) -> bytes:
    """Encode one record."""
    if not key:
        raise EncodingError("record key must not be empty")
    if len(key) >= LENGTH_LIMIT or len(value) >= LENGTH_LIMIT:
        raise EncodingError(f"record lengths overflow 32 bits ({len(key)}, {len(value)})")
    return HEADER.pack(len(key), len(value)) + key + value


def encode_records(pairs: Iterable[tuple[bytes, bytes]]) -> bytes:
    """Concatenate encoded records."""
    return b"".join(encode_record(key, value) for key, value in pairs)


def decode_record(buf: bytes | memoryview, at: int = 0) -> tuple[KvRecord, int]:
    """Decode the record at offset `at`; returns it with the next offset."""
    if at + HEADER_SIZE > len(buf):
        raise CorruptionError(f"truncated header at offset {at}")
    key_len, val_len = HEADER.unpack_from(buf, at)
    if key_len == 0:
        raise CorruptionError(f"zero-length key at offset {at}")
    key_start = at + HEADER_SIZE
    value_start = key_start + key_len
    end = value_start + val_len
    if end > len(buf):
        raise CorruptionError(
            f"record at offset {at} needs {end - at} bytes, {len(buf) - at} available"
        )
    record = KvRecord(bytes(buf[key_start:value_start]), bytes(buf[value_start:end]))
    return record, end


def iterate_records(region: bytes | memoryview, committed: int | None = None) -> Iterator[KvRecord]:
    """Yield records in [0, committed) in append order."""
    limit = len(region) if committed is None else committed
    if limit > len(region):
        raise CorruptionError(f"committed length {limit} exceeds region of {len(region)} bytes")
    view = memoryview(region)[:limit]
    at = 0
    while at < limit:
        record, at = decode_record(view, at)
        yield record


def hash64(key: bytes) -> int:
    """FNV-1a, 64-bit."""
    h = FNV_OFFSET_BASIS
    for byte in key:
        h ^= byte
        h = (h * FNV_PRIME) & MASK64
    return h


def route(key: bytes, num_workers: int) -> int:
    """Rank that reduces key."""
    if num_workers < 1:
        raise ValueError(f"num_workers must be at least 1, got {num_workers}")
    return hash64(key) % num_workers


@dataclass(frozen=True)
class ControlWord:
    """Decoded bucket control word."""

    committed: int
    linked: bool = False
    sealed: bool = False

    @classmethod
    def unpack(cls, word: int) -> ControlWord:
        return cls(
            committed=word & COMMITTED_MASK,
            linked=bool(word & NEXT_BIT),
            sealed=bool(word & SEAL_BIT),
        )

    def pack(self) -> int:
        return (
            self.committed
            | (NEXT_BIT if self.linked else 0)
            | (SEAL_BIT if self.sealed else 0)
        )


def record_capacity(bucket_size: int) -> int:
    """Record bytes a bucket of bucket_size can hold."""
    return bucket_size - BUCKET_OVERHEAD


def link_offset(bucket_disp: int, bucket_size: int) -> int:
    """Displacement of the successor link within a bucket."""
    return bucket_disp + bucket_size - LINK_SIZE
