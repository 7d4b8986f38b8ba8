"""Tests for corpus generation, oracles, task splitting and skew profiles."""

import pytest

from mr1s.config import KB
from mr1s.dataset import (
    CorpusSpec,
    SkewProfile,
    TaskDescriptor,
    counts_digest,
    generate_corpus,
    oracle_path_for,
    parse_skew,
    read_oracle,
    split_tasks,
)


class TestSplitTasks:
    """Tests for split_tasks."""

    def test_exact_multiple(self):
        """Test a file that divides evenly."""
        tasks = split_tasks(300, 100)

        assert [(t.index, t.offset, t.length) for t in tasks] == [
            (0, 0, 100), (1, 100, 100), (2, 200, 100)
        ]

    def test_short_last_task(self):
        """Test the last task covers the remainder."""
        tasks = split_tasks(250, 100)

        assert len(tasks) == 3
        assert tasks[-1] == TaskDescriptor(index=2, offset=200, length=50)
        assert tasks[-1].end == 250

    def test_empty_file(self):
        """Test an empty file has no tasks."""
        assert split_tasks(0, 100) == []

    def test_invalid_task_size(self):
        """Test task_size must be positive."""
        with pytest.raises(ValueError):
            split_tasks(10, 0)


class TestSkewProfile:
    """Tests for skew profiles."""

    def test_parse_worker(self):
        """Test workerNxK applies to all of a worker's tasks."""
        profile = parse_skew("worker0x4")

        assert profile.repeat_for(0, 0) == 4
        assert profile.repeat_for(0, 8) == 4
        assert profile.repeat_for(1, 1) == 1
        assert not profile.balanced

    def test_task_overrides_worker(self):
        """Test a task entry takes precedence over its worker's."""
        profile = parse_skew("worker0x4, task8x2")

        assert profile.repeat_for(0, 8) == 2
        assert profile.repeat_for(0, 4) == 4

    def test_none(self):
        """Test 'none' and empty strings are balanced."""
        assert parse_skew("none").balanced
        assert parse_skew("").balanced
        assert str(SkewProfile()) == "none"

    def test_str_round_trip(self):
        """Test the canonical text form parses back."""
        profile = parse_skew("task3x2,worker1x5")

        assert str(profile) == "worker1x5,task3x2"
        assert parse_skew(str(profile)) == profile

    @pytest.mark.parametrize("text", ["rank0x4", "worker0", "worker0x0", "workerx4"])
    def test_invalid(self, text):
        """Test malformed items and zero repeats are rejected."""
        with pytest.raises(ValueError):
            parse_skew(text)


class TestCorpusSpec:
    """Tests for corpus parameter validation."""

    def test_defaults_valid(self):
        """Test the defaults are valid."""
        assert CorpusSpec(size=KB).validate() == []

    def test_invalid_values(self):
        """Test negative sizes and empty vocabularies are reported."""
        problems = CorpusSpec(size=-1, vocab_size=0, zipf_s=-0.5).validate()

        assert len(problems) == 3

    def test_vocabulary_too_large_for_lengths(self):
        """Test the vocabulary must fit the word length range."""
        assert CorpusSpec(size=KB, vocab_size=30, word_len_range=(1, 1)).validate()


class TestGenerateCorpus:
    """Tests for generate_corpus."""

    def test_exact_size_and_oracle(self, tmp_path, reference_counts):
        """Test the file has the exact size and the oracle counts every token."""
        spec = CorpusSpec(size=20 * KB, vocab_size=300, seed=3)

        report = generate_corpus(spec, tmp_path / "c.txt")
        data = report.path.read_bytes()

        assert len(data) == 20 * KB
        assert report.counts == reference_counts(data)
        assert report.token_count == sum(report.counts.values())
        assert read_oracle(oracle_path_for(report.path)) == report.counts
        assert report.digest == counts_digest(report.counts.items())

    def test_deterministic(self, tmp_path):
        """Test the same spec yields identical bytes and digests."""
        spec = CorpusSpec(size=8 * KB, vocab_size=200, seed=11)

        a = generate_corpus(spec, tmp_path / "a.txt")
        b = generate_corpus(spec, tmp_path / "b.txt")

        assert a.path.read_bytes() == b.path.read_bytes()
        assert a.digest == b.digest

    def test_seed_changes_output(self, tmp_path):
        """Test a different seed yields a different corpus."""
        a = generate_corpus(CorpusSpec(size=8 * KB, seed=1), tmp_path / "a.txt")
        b = generate_corpus(CorpusSpec(size=8 * KB, seed=2), tmp_path / "b.txt")

        assert a.digest != b.digest

    def test_empty_corpus(self, tmp_path):
        """Test size 0 yields an empty file and an empty oracle."""
        report = generate_corpus(CorpusSpec(size=0), tmp_path / "empty.txt")

        assert report.path.read_bytes() == b""
        assert report.counts == {}
        assert read_oracle(report.oracle_path) == {}

    def test_zipf_skew(self, tmp_path):
        """Test the most frequent word dominates a skewed corpus."""
        report = generate_corpus(
            CorpusSpec(size=64 * KB, vocab_size=1000, zipf_s=1.5, seed=5), tmp_path / "z.txt"
        )
        counts = sorted(report.counts.values(), reverse=True)

        assert counts[0] > 5 * counts[9]

    def test_lines_are_bounded(self, tmp_path):
        """Test words are broken into lines."""
        report = generate_corpus(CorpusSpec(size=16 * KB, seed=9), tmp_path / "l.txt")

        lines = report.path.read_bytes().split(b"\n")

        assert len(lines) > 10
        assert all(len(line.split()) <= 8 for line in lines)

    def test_invalid_spec(self, tmp_path):
        """Test an invalid spec raises ValueError."""
        with pytest.raises(ValueError):
            generate_corpus(CorpusSpec(size=-5), tmp_path / "bad.txt")


class TestDigest:
    """Tests for counts_digest."""

    def test_order_independent(self):
        """Test the digest does not depend on input order."""
        items = [(b"b", 2), (b"a", 1)]

        assert counts_digest(items) == counts_digest(reversed(items))

    def test_value_sensitive(self):
        """Test a changed count changes the digest."""
        assert counts_digest([(b"a", 1)]) != counts_digest([(b"a", 2)])
