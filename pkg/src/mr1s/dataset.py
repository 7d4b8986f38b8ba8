"""Corpus generation, task splitting and imbalance profiles.

This module provides:
- CorpusSpec / generate_corpus: seeded Zipf-distributed text corpora whose
  exact word counts are known (the oracle for every job)
- Oracle CSV reading and writing, and the canonical result digest
- TaskDescriptor / split_tasks: equally-sized byte tasks over the input
- SkewProfile / parse_skew: per-worker task repeat counts
"""

from __future__ import annotations

import csv
import hashlib
import logging
import re
from collections.abc import Iterable
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

ALPHABET = b"abcdefghijklmnopqrstuvwxyz"
WORDS_PER_LINE = 8
SAMPLE_BATCH = 1 << 20  # Tokens drawn per numpy batch

DEFAULT_VOCAB_SIZE = 50_000
DEFAULT_ZIPF_S = 1.1
DEFAULT_SEED = 42
DEFAULT_WORD_LEN_RANGE = (3, 10)


@dataclass(frozen=True)
class TaskDescriptor:
    """A byte range of the input processed as one Map task."""

    index: int
    offset: int
    length: int
    repeat: int = 1

    @property
    def end(self) -> int:
        return self.offset + self.length


def split_tasks(file_len: int, task_size: int) -> list[TaskDescriptor]:
    """Split file_len bytes into ceil(file_len / task_size) ordered tasks.

    Raises:
        ValueError: If task_size is not positive
    """
    if task_size <= 0:
        raise ValueError(f"task_size must be positive, got {task_size}")
    return [
        TaskDescriptor(index=i, offset=offset, length=min(task_size, file_len - offset))
        for i, offset in enumerate(range(0, file_len, task_size))
    ]


@dataclass
class SkewProfile:
    """Repeat counts simulating imbalance.

    `workers` maps a rank to the repeat count of all its tasks; `tasks` maps
    individual task indices and takes precedence.
    """

    workers: dict[int, int] = field(default_factory=dict)
    tasks: dict[int, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for repeat in [*self.workers.values(), *self.tasks.values()]:
            if repeat < 1:
                raise ValueError(f"repeat counts must be at least 1, got {repeat}")

    def repeat_for(self, rank: int, task_index: int) -> int:
        return self.tasks.get(task_index, self.workers.get(rank, 1))

    @property
    def balanced(self) -> bool:
        return all(r == 1 for r in [*self.workers.values(), *self.tasks.values()])

    def __str__(self) -> str:
        parts = [f"worker{rank}x{k}" for rank, k in sorted(self.workers.items())]
        parts += [f"task{index}x{k}" for index, k in sorted(self.tasks.items())]
        return ",".join(parts) or "none"


_SKEW_ITEM = re.compile(r"^(worker|task)\s*(\d+)\s*x\s*(\d+)$")


def parse_skew(text: str) -> SkewProfile:
    """Parse a skew flag such as 'worker0x4' or 'worker0x4,task7x2'.

    Raises:
        ValueError: On malformed items or repeat counts below 1
    """
    text = text.strip().lower()
    profile = SkewProfile()
    if text in ("", "none"):
        return profile
    for item in text.split(","):
        match = _SKEW_ITEM.match(item.strip())
        if not match:
            raise ValueError(f"Invalid skew item: {item!r} (expected workerNxK or taskNxK)")
        kind, number, repeat = match.group(1), int(match.group(2)), int(match.group(3))
        if repeat < 1:
            raise ValueError(f"Repeat count must be at least 1 in {item!r}")
        if kind == "worker":
            profile.workers[number] = repeat
        else:
            profile.tasks[number] = repeat
    return profile


@dataclass(frozen=True)
class CorpusSpec:
    """Parameters of a generated corpus; generation is a pure function of them."""

    size: int
    vocab_size: int = DEFAULT_VOCAB_SIZE
    zipf_s: float = DEFAULT_ZIPF_S
    seed: int = DEFAULT_SEED
    word_len_range: tuple[int, int] = DEFAULT_WORD_LEN_RANGE

    def validate(self) -> list[str]:
        problems: list[str] = []
        lo, hi = self.word_len_range
        if self.size < 0:
            problems.append(f"size must not be negative, got {self.size}")
        if self.vocab_size < 1:
            problems.append(f"vocab_size must be at least 1, got {self.vocab_size}")
        if self.zipf_s < 0:
            problems.append(f"zipf_s must not be negative, got {self.zipf_s}")
        if not 1 <= lo <= hi:
            problems.append(f"invalid word length range {self.word_len_range}")
        elif self.vocab_size > sum(26**n for n in range(lo, hi + 1)):
            problems.append(f"vocab_size {self.vocab_size} exceeds distinct words of that length")
        return problems


@dataclass
class GenerationReport:
    """Exact Word-Count answer for a generated corpus."""

    path: Path
    size: int
    token_count: int
    counts: dict[bytes, int]
    digest: str

    @property
    def oracle_path(self) -> Path:
        return oracle_path_for(self.path)


def oracle_path_for(corpus: Path) -> Path:
    """`c.txt` -> `c.oracle.csv`."""
    return corpus.with_suffix(".oracle.csv")


def counts_digest(items: Iterable[tuple[bytes, object]]) -> str:
    """SHA-256 over key-sorted `word,count` lines; shared by oracle and results."""
    h = hashlib.sha256()
    for key, count in sorted(items, key=lambda item: item[0]):
        h.update(key + b"," + str(count).encode() + b"\n")
    return h.hexdigest()


def _build_vocabulary(spec: CorpusSpec, rng: np.random.Generator) -> list[bytes]:
    lo, hi = spec.word_len_range
    words: list[bytes] = []
    seen: set[bytes] = set()
    while len(words) < spec.vocab_size:
        need = spec.vocab_size - len(words)
        lengths = rng.integers(lo, hi + 1, size=need)
        letters = rng.integers(0, len(ALPHABET), size=int(lengths.sum()))
        raw = bytes(np.frombuffer(ALPHABET, dtype=np.uint8)[letters])
        start = 0
        for length in lengths.tolist():
            word = raw[start:start + length]
            start += length
            if word not in seen:
                seen.add(word)
                words.append(word)
    return words


def _zipf_cdf(vocab_size: int, s: float) -> np.ndarray:
    weights = np.arange(1, vocab_size + 1, dtype=np.float64) ** -s
    cdf = np.cumsum(weights)
    return cdf / cdf[-1]


def generate_corpus(spec: CorpusSpec, out: Path) -> GenerationReport:
    """Write a corpus of exactly spec.size bytes and its oracle CSV.

    Words are drawn Zipf(s) over a seeded vocabulary by inverse-CDF lookup,
    separated by spaces with a newline every few words; the tail is padded
    with spaces.

    Raises:
        ValueError: If the spec is invalid
        OSError: On write failure
    """
    problems = spec.validate()
    if problems:
        raise ValueError("; ".join(problems))

    rng = np.random.default_rng(spec.seed)
    vocab = _build_vocabulary(spec, rng)
    cdf = _zipf_cdf(spec.vocab_size, spec.zipf_s)
    token_bytes = np.array([len(w) + 1 for w in vocab], dtype=np.int64)
    counts = np.zeros(spec.vocab_size, dtype=np.int64)

    written = 0
    tokens = 0
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "wb") as f:
        while True:
            remaining = spec.size - written
            if remaining <= 0:
                break
            draws = np.searchsorted(cdf, rng.random(SAMPLE_BATCH), side="right")
            draws = np.minimum(draws, spec.vocab_size - 1)
            fit = int(np.searchsorted(np.cumsum(token_bytes[draws]), remaining, side="right"))
            draws = draws[:fit]
            if fit:
                parts = []
                for i, word in enumerate(draws.tolist(), start=tokens):
                    parts.append(vocab[word])
                    parts.append(b"\n" if i % WORDS_PER_LINE == WORDS_PER_LINE - 1 else b" ")
                chunk = b"".join(parts)
                f.write(chunk)
                written += len(chunk)
                tokens += fit
                counts += np.bincount(draws, minlength=spec.vocab_size)
            if fit < SAMPLE_BATCH:
                # No further token fits; pad to the exact size
                f.write(b" " * (spec.size - written))
                written = spec.size
                break

    word_counts = {vocab[i]: int(counts[i]) for i in np.flatnonzero(counts).tolist()}
    report = GenerationReport(
        path=out,
        size=written,
        token_count=tokens,
        counts=word_counts,
        digest=counts_digest(word_counts.items()),
    )
    write_oracle(report.oracle_path, word_counts)
    logger.info(
        f"Generated {out}: {written} bytes, {tokens} tokens, "
        f"{len(word_counts)} distinct words (zipf_s={spec.zipf_s}, seed={spec.seed})"
    )
    return report


def write_oracle(path: Path, counts: dict[bytes, int]) -> None:
    """Write `word,count` rows sorted by key."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["word", "count"])
        for word in sorted(counts):
            writer.writerow([word.decode("ascii"), counts[word]])


def read_oracle(path: Path) -> dict[bytes, int]:
    """Read an oracle CSV written by write_oracle."""
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        return {row["word"].encode("ascii"): int(row["count"]) for row in reader}
