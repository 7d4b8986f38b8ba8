"""Tests for the record codec, hashing and bucket control words."""

import random
from collections import Counter

import pytest

from mr1s.kvcodec import (
    BUCKET_OVERHEAD,
    FNV_OFFSET_BASIS,
    HEADER_SIZE,
    NEXT_BIT,
    SEAL_BIT,
    ControlWord,
    CorruptionError,
    EncodingError,
    decode_record,
    encode_record,
    encode_records,
    hash64,
    iterate_records,
    link_offset,
    record_capacity,
    route,
)


class TestRecords:
    """Tests for record framing."""

    def test_layout(self):
        """Test header, key and value order."""
        data = encode_record(b"cat", b"\x02\x00")

        assert data == b"\x03\x00\x00\x00\x02\x00\x00\x00cat\x02\x00"
        assert len(data) == HEADER_SIZE + 3 + 2

    def test_decode_returns_next_offset(self):
        """Test decode_record walks a concatenation."""
        data = encode_records([(b"a", b"1"), (b"bb", b"")])

        first, at = decode_record(data)
        second, end = decode_record(data, at)

        assert (first.key, first.value) == (b"a", b"1")
        assert (second.key, second.value) == (b"bb", b"")
        assert end == len(data)
        assert at == HEADER_SIZE + 1 + 1

    def test_empty_key_rejected(self):
        """Test a record must have a key."""
        with pytest.raises(EncodingError):
            encode_record(b"", b"x")

    def test_truncated_record(self):
        """Test a record cut short is detected."""
        data = encode_record(b"word", b"12345678")

        with pytest.raises(CorruptionError):
            decode_record(data[:-1])
        with pytest.raises(CorruptionError):
            decode_record(data[:5])

    def test_iterate_stops_at_committed(self):
        """Test bytes past the committed length are ignored."""
        committed = encode_records([(b"x", b"1"), (b"y", b"2")])
        region = committed + b"\xff" * 32

        keys = [r.key for r in iterate_records(region, len(committed))]

        assert keys == [b"x", b"y"]

    def test_committed_beyond_region(self):
        """Test a committed length larger than the region is corruption."""
        with pytest.raises(CorruptionError):
            list(iterate_records(b"abc", 10))

    @pytest.mark.parametrize("seed", [1, 2, 3])
    def test_random_records_round_trip(self, seed):
        """Test ten thousand random records decode back in order."""
        rng = random.Random(seed)
        pairs = [
            (rng.randbytes(rng.randint(1, 40)), rng.randbytes(rng.randint(0, 24)))
            for _ in range(10_000)
        ]
        data = encode_records(pairs)

        decoded = [(r.key, r.value) for r in iterate_records(data, len(data))]

        assert decoded == pairs


class TestHashing:
    """Tests for FNV-1a hashing and routing."""

    def test_known_vectors(self):
        """Test published FNV-1a 64-bit vectors."""
        assert hash64(b"") == FNV_OFFSET_BASIS
        assert hash64(b"a") == 0xAF63DC4C8601EC8C
        assert hash64(b"foobar") == 0x85944171F73967E8

    def test_route_in_range_and_stable(self):
        """Test routing is deterministic and within [0, P)."""
        for key in (b"the", b"cat", b"zebra", b"0"):
            assert 0 <= route(key, 7) < 7
            assert route(key, 7) == route(key, 7)
            assert route(key, 1) == 0

    def test_route_spreads_keys(self):
        """Test many keys reach every worker."""
        counts = Counter(route(f"word{i}".encode(), 8) for i in range(4000))

        assert set(counts) == set(range(8))
        assert min(counts.values()) > 300

    def test_route_invalid_workers(self):
        """Test routing needs at least one worker."""
        with pytest.raises(ValueError):
            route(b"x", 0)


class TestControlWord:
    """Tests for bucket control words."""

    def test_pack_bits(self):
        """Test the committed count, successor and seal bits."""
        assert ControlWord(10).pack() == 10
        assert ControlWord(10, linked=True).pack() == 10 | NEXT_BIT
        assert ControlWord(10, sealed=True).pack() == 10 | SEAL_BIT

    def test_unpack_round_trip(self):
        """Test unpack inverts pack."""
        word = ControlWord(123456, linked=True, sealed=True)

        assert ControlWord.unpack(word.pack()) == word

    def test_bucket_geometry(self):
        """Test record capacity and link position."""
        assert BUCKET_OVERHEAD == 24
        assert record_capacity(64) == 40
        assert link_offset(128, 64) == 128 + 48
