"""Tests for the Word-Count use case."""

import random
import string

import pytest

from mr1s.usecase import (
    COUNT_MAX,
    USE_CASES,
    MapError,
    ReduceOverflowError,
    TaskInput,
    WordCount,
)


def collect(uc: WordCount, task: TaskInput) -> dict[bytes, int]:
    counts: dict[bytes, int] = {}

    def emit(key: bytes, value: int) -> None:
        counts[key] = counts.get(key, 0) + value

    uc.map(task, emit)
    return counts


def split_counts(uc: WordCount, data: bytes, cut: int, overlap: int = 16) -> dict[bytes, int]:
    """Count data as two tasks split at cut, the way InputReader frames them."""
    first = TaskInput(
        data=data[:min(cut + overlap, len(data))],
        start=0,
        stop=cut,
        first=True,
        at_eof=cut + overlap >= len(data),
    )
    second = TaskInput(
        data=data[cut - 1:],
        start=1,
        stop=len(data) - cut + 1,
        first=False,
        at_eof=True,
    )
    totals = collect(uc, first)
    for key, value in collect(uc, second).items():
        totals[key] = totals.get(key, 0) + value
    return totals


class TestWordCountMap:
    """Tests for WordCount.map."""

    def test_simple_sentence(self, word_count):
        """Test the basic example."""
        counts = collect(word_count, TaskInput.whole(b"the cat and the dog"))

        assert counts == {b"the": 2, b"cat": 1, b"and": 1, b"dog": 1}

    def test_lowercase_and_separators(self, word_count):
        """Test tokens are lower-cased runs of ASCII alphanumerics."""
        counts = collect(word_count, TaskInput.whole(b"The THE the, x1-x1\ttab\n"))

        assert counts == {b"the": 3, b"x1": 2, b"tab": 1}

    def test_empty_input(self, word_count):
        """Test empty input emits nothing."""
        assert collect(word_count, TaskInput.whole(b"")) == {}

    def test_non_ascii_bytes_separate(self, word_count):
        """Test non-ASCII bytes act as separators."""
        counts = collect(word_count, TaskInput.whole("café naïve".encode()))

        assert counts == {b"caf": 1, b"na": 1, b"ve": 1}

    @pytest.mark.parametrize("cut", range(1, 24))
    def test_split_invariance(self, word_count, reference_counts, cut):
        """Test every split point yields the whole-input counts."""
        data = b"alpha beta  gamma\ndelta alpha beta9"

        assert split_counts(word_count, data, cut) == reference_counts(data)

    def test_split_invariance_every_cut(self, word_count, reference_counts):
        """Test every cut point of a 1 KiB mixed-case text yields the whole-input counts."""
        rng = random.Random(11)
        alphabet = string.ascii_letters + string.digits
        separators = [" ", "  ", "\n", ", ", "-", "\t"]
        text = ""
        while len(text) < 1024:
            word = "".join(rng.choice(alphabet) for _ in range(rng.randint(1, 10)))
            text += word + rng.choice(separators)
        data = text[:1024].encode()
        expected = reference_counts(data)

        for cut in range(1, len(data)):
            assert split_counts(word_count, data, cut) == expected, f"cut at {cut}"

    def test_token_past_overlap(self, word_count):
        """Test a token running through the whole overlap is an error."""
        task = TaskInput(data=b"ab cdefgh", start=0, stop=4, first=True, at_eof=False)

        with pytest.raises(MapError):
            collect(word_count, task)


class TestWordCountReduce:
    """Tests for reduce and value encoding."""

    def test_reduce_adds(self, word_count):
        """Test counts add up."""
        assert word_count.reduce(b"x", 2, 3) == 5
        assert word_count.reduce_local(b"x", 2, 3) == 5

    def test_reduce_overflow(self, word_count):
        """Test a sum past 64 bits raises."""
        with pytest.raises(ReduceOverflowError):
            word_count.reduce(b"x", COUNT_MAX, 1)

    @pytest.mark.parametrize("seed", range(5))
    def test_reduce_is_associative_and_commutative(self, word_count, seed):
        """Test random triples fold to the same count in any order and grouping."""
        rng = random.Random(seed)
        for _ in range(200):
            a, b, c = (rng.randint(0, 1 << 60) for _ in range(3))
            r = word_count.reduce

            assert r(b"k", a, b) == r(b"k", b, a)
            assert r(b"k", r(b"k", a, b), c) == r(b"k", a, r(b"k", b, c))

    def test_value_encoding(self, word_count):
        """Test counts are 8-byte little-endian."""
        assert word_count.encode_value(1) == b"\x01" + bytes(7)
        assert word_count.decode_value(word_count.encode_value(2**40)) == 2**40

    def test_registry(self):
        """Test the use case registry."""
        assert isinstance(USE_CASES["wordcount"](), WordCount)
