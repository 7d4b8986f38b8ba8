"""Pytest fixtures for mr1s tests."""

from __future__ import annotations

import dataclasses
import re
from collections import Counter
from pathlib import Path
from typing import Callable

import pytest

from mr1s.config import KB, JobConfig
from mr1s.dataset import CorpusSpec, GenerationReport, generate_corpus
from mr1s.usecase import WordCount


@pytest.fixture
def word_count() -> WordCount:
    """The Word-Count use case."""
    return WordCount()


@pytest.fixture
def small_corpus(tmp_path: Path) -> GenerationReport:
    """A 96 KiB Zipf corpus with its oracle."""
    spec = CorpusSpec(size=96 * KB, vocab_size=1500, zipf_s=1.1, seed=7)
    return generate_corpus(spec, tmp_path / "corpus.txt")


@pytest.fixture
def make_config(small_corpus: GenerationReport) -> Callable[..., JobConfig]:
    """Factory for small-scale job configurations over small_corpus.

    Sizes are chosen so a job has many tasks, bucket chains grow and
    transfers are split into several chunks.
    """

    def factory(**overrides: object) -> JobConfig:
        cfg = JobConfig(
            filename=small_corpus.path,
            task_size=4 * KB,
            chunk_size=1 * KB,
            bucket_size=16 * KB,
            win_size=4 * KB,
            num_workers=4,
            boundary_overlap=256,
            local_reduce_limit=512,
        )
        return dataclasses.replace(cfg, **overrides)

    return factory


@pytest.fixture
def write_text(tmp_path: Path) -> Callable[[bytes, str], Path]:
    """Write bytes to a file under tmp_path."""

    def writer(data: bytes, name: str = "input.txt") -> Path:
        path = tmp_path / name
        path.write_bytes(data)
        return path

    return writer


@pytest.fixture
def reference_counts() -> Callable[[bytes], dict[bytes, int]]:
    """Word counts computed without any engine."""

    def count(data: bytes) -> dict[bytes, int]:
        return dict(Counter(m.group().lower() for m in re.finditer(rb"[A-Za-z0-9]+", data)))

    return count
