"""Benchmark harness: engine runs, scaling sweeps and oracle verification.

Every job becomes one CSV row with per-phase wall times and peak resident
memory. Repeated runs get an extra mean row and a standard deviation row.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Any

import numpy as np

from .combine import decode_run, encode_run
from .config import (
    DEFAULT_BUCKET_SIZE,
    DEFAULT_TASK_SIZE,
    DEFAULT_WIN_SIZE,
    GB,
    KB,
    MB,
    JobConfig,
)
from .coupled import CoupledEngine
from .dataset import (
    CorpusSpec,
    SkewProfile,
    counts_digest,
    generate_corpus,
    parse_skew,
    read_oracle,
)
from .decoupled import DecoupledEngine
from .job import EngineError, JobSummary, MapReduceJob
from .memory import MemorySampler, PsutilMemorySampler
from .usecase import UseCase, WordCount

logger = logging.getLogger(__name__)

CSV_COLUMNS = (
    "engine",
    "workers",
    "corpus_bytes",
    "task_size",
    "chunk_size",
    "skew",
    "checkpoint",
    "rep",
    "t_map_s",
    "t_reduce_s",
    "t_combine_s",
    "t_total_s",
    "peak_mem_bytes",
    "result_digest",
)
TIMING_COLUMNS = ("t_map_s", "t_reduce_s", "t_combine_s", "t_total_s", "peak_mem_bytes")
ABORTED_DIGEST = "ABORTED"

SCALE_BELOW = 1 * GB  # Corpora smaller than this get scaled size defaults
MIN_SCALED_TASK_SIZE = 64 * KB
MIN_SCALED_WINDOW_SIZE = 64 * KB
DEFAULT_SWEEP_WORKERS = (1, 2, 4, 8)
DEFAULT_STRONG_SIZE = 256 * MB
DEFAULT_WEAK_BYTES_PER_WORKER = 32 * MB
DEFAULT_SWEEP_SKEW = "worker0x4"

ENGINES: dict[str, type[MapReduceJob[Any]]] = {
    "1s": DecoupledEngine,
    "2s": CoupledEngine,
}


class BenchError(Exception):
    """Base exception for harness failures."""


class VerificationError(BenchError):
    """A result does not match its oracle."""


def scaled_task_size(corpus_bytes: int, num_workers: int, requested: int | None) -> int | None:
    """Task size for a corpus when none was requested.

    Below 1 GiB the default is scaled to max(corpus / (4 * workers), 64 KiB)
    so every worker still sees several tasks. Returns None to keep the
    configured default.
    """
    if requested is not None:
        return requested
    if corpus_bytes >= SCALE_BELOW:
        return None
    return max(corpus_bytes // (4 * num_workers), MIN_SCALED_TASK_SIZE)


def scaled_window_sizes(corpus_bytes: int, num_workers: int) -> tuple[int, int] | None:
    """Initial Key-Value and Combine window sizes for a small corpus.

    Below 1 GiB each worker's Key-Value window starts at its share of the
    corpus and the Combine window at a sixteenth of that, both capped by
    the defaults and floored at 64 KiB. Buckets and Combine regions grow on
    demand. Returns None to keep the configured defaults.
    """
    if corpus_bytes >= SCALE_BELOW:
        return None
    share = corpus_bytes // max(num_workers, 1)
    bucket_size = min(DEFAULT_BUCKET_SIZE, max(share, MIN_SCALED_WINDOW_SIZE))
    win_size = min(DEFAULT_WIN_SIZE, max(share // 16, MIN_SCALED_WINDOW_SIZE))
    return bucket_size, win_size


def scale_to_corpus(cfg: JobConfig, corpus_bytes: int, explicit: set[str]) -> None:
    """Shrink the size defaults of cfg for a small corpus.

    Fields named in explicit were set by the user and are left alone, as
    are fields that no longer hold their default.
    """
    defaults = {
        "task_size": DEFAULT_TASK_SIZE,
        "bucket_size": DEFAULT_BUCKET_SIZE,
        "win_size": DEFAULT_WIN_SIZE,
    }
    scaled: dict[str, int] = {}
    task_size = scaled_task_size(corpus_bytes, cfg.num_workers, None)
    if task_size is not None:
        scaled["task_size"] = task_size
    windows = scaled_window_sizes(corpus_bytes, cfg.num_workers)
    if windows is not None:
        scaled["bucket_size"], scaled["win_size"] = windows
    for name, value in scaled.items():
        if name in explicit or getattr(cfg, name) != defaults[name]:
            continue
        setattr(cfg, name, value)
        logger.info(f"Scaled {name} to {value} bytes for a {corpus_bytes}-byte corpus")


def summary_row(summary: JobSummary, rep: int | str) -> dict[str, str]:
    """One CSV row for a finished job."""
    return {
        "engine": summary.engine,
        "workers": str(summary.num_workers),
        "corpus_bytes": str(summary.corpus_bytes),
        "task_size": str(summary.task_size),
        "chunk_size": str(summary.chunk_size),
        "skew": summary.skew,
        "checkpoint": str(int(summary.checkpoint)),
        "rep": str(rep),
        "t_map_s": f"{summary.t_map_s:.6f}",
        "t_reduce_s": f"{summary.t_reduce_s:.6f}",
        "t_combine_s": f"{summary.t_combine_s:.6f}",
        "t_total_s": f"{summary.t_total_s:.6f}",
        "peak_mem_bytes": "" if summary.peak_mem_bytes is None else str(summary.peak_mem_bytes),
        "result_digest": summary.result_digest,
    }


def aborted_row(engine: str, cfg: JobConfig, corpus_bytes: int, rep: int) -> dict[str, str]:
    """Row flagging a run that did not finish."""
    row = dict.fromkeys(CSV_COLUMNS, "")
    row.update(
        engine=engine.upper(),
        workers=str(cfg.num_workers),
        corpus_bytes=str(corpus_bytes),
        task_size=str(cfg.task_size),
        chunk_size=str(cfg.chunk_size),
        skew=str(cfg.skew_profile),
        checkpoint=str(int(cfg.checkpoint is not None)),
        rep=str(rep),
        result_digest=ABORTED_DIGEST,
    )
    return row


def aggregate_rows(rows: Sequence[dict[str, str]]) -> list[dict[str, str]]:
    """Mean and sample standard deviation rows; empty for fewer than two rows.

    Peak memory is aggregated over the rows that report it.
    """
    if len(rows) < 2:
        return []
    mean_row = dict(rows[0], rep="mean")
    std_row = dict(rows[0], rep="std")
    for column in TIMING_COLUMNS:
        values = np.array([float(r[column]) for r in rows if r[column] != ""], dtype=np.float64)
        if values.size == 0:
            mean_row[column] = std_row[column] = ""
            continue
        std = float(np.std(values, ddof=1)) if values.size > 1 else 0.0
        if column == "peak_mem_bytes":
            mean_row[column] = str(int(round(float(np.mean(values)))))
            std_row[column] = str(int(round(std)))
        else:
            mean_row[column] = f"{float(np.mean(values)):.6f}"
            std_row[column] = f"{std:.6f}"
    digests = {r["result_digest"] for r in rows}
    if len(digests) > 1:
        logger.warning(f"Repetitions disagree on the result: {sorted(digests)}")
        mean_row["result_digest"] = std_row["result_digest"] = "MIXED"
    return [mean_row, std_row]


class CsvSink:
    """CSV writer with the fixed header; rows are flushed as they arrive."""

    def __init__(self, stream: IO[str]):
        self._stream = stream
        self._writer = csv.DictWriter(stream, fieldnames=CSV_COLUMNS, lineterminator="\n")
        self._writer.writeheader()
        self.rows: list[dict[str, str]] = []

    def write(self, row: dict[str, str]) -> None:
        self._writer.writerow(row)
        self._stream.flush()
        self.rows.append(row)


def make_job(
    engine: str,
    cfg: JobConfig,
    uc: UseCase[Any],
    sampler: MemorySampler | None = None,
) -> MapReduceJob[Any]:
    """Instantiate an engine by its CLI name ("1s" or "2s")."""
    try:
        engine_cls = ENGINES[engine.lower()]
    except KeyError:
        raise BenchError(f"Unknown engine {engine!r}; expected one of {sorted(ENGINES)}") from None
    return engine_cls(cfg, uc, sampler=sampler)


def run_repetitions(
    engine: str,
    cfg: JobConfig,
    reps: int,
    sink: CsvSink,
    uc: UseCase[Any] | None = None,
    sampler_factory: Callable[[], MemorySampler | None] = PsutilMemorySampler,
) -> list[JobSummary]:
    """Run cfg `reps` times on one engine, writing a row per run.

    Raises:
        EngineError: After writing an aborted row for the failed repetition
    """
    if reps < 1:
        raise BenchError(f"reps must be at least 1, got {reps}")
    uc = uc or WordCount()
    summaries: list[JobSummary] = []
    rows: list[dict[str, str]] = []
    for rep in range(reps):
        job = make_job(engine, cfg, uc, sampler_factory())
        try:
            summary = job.run()
        except EngineError:
            corpus_bytes = cfg.filename.stat().st_size if cfg.filename.exists() else 0
            sink.write(aborted_row(engine, cfg, corpus_bytes, rep))
            raise
        row = summary_row(summary, rep)
        sink.write(row)
        rows.append(row)
        summaries.append(summary)
    for row in aggregate_rows(rows):
        sink.write(row)
    return summaries


def write_result(path: Path, result: list[tuple[bytes, Any]], uc: UseCase[Any]) -> None:
    """Store a final run in record format."""
    path.write_bytes(encode_run(result, uc))


def read_result(path: Path, uc: UseCase[Any]) -> list[tuple[bytes, Any]]:
    """Load a run written by write_result."""
    return decode_run(path.read_bytes(), uc)


def compare_with_oracle(
    result: Sequence[tuple[bytes, object]], oracle: dict[bytes, int]
) -> list[str]:
    """Differences between a result and an oracle, empty when they agree."""
    problems: list[str] = []
    found = dict(result)
    if len(found) != len(result):
        problems.append("result contains duplicate keys")
    for key in sorted(found.keys() - oracle.keys())[:10]:
        problems.append(f"unexpected key {key!r}")
    for key in sorted(oracle.keys() - found.keys())[:10]:
        problems.append(f"missing key {key!r}")
    wrong = [k for k in sorted(found.keys() & oracle.keys()) if found[k] != oracle[k]]
    for key in wrong[:10]:
        problems.append(f"{key!r}: got {found[key]}, expected {oracle[key]}")
    if not problems and counts_digest(result) != counts_digest(oracle.items()):
        problems.append("digest mismatch")
    return problems


def verify_against_oracle(result: Sequence[tuple[bytes, object]], oracle_path: Path) -> None:
    """Raise VerificationError unless result equals the oracle CSV."""
    if not oracle_path.exists():
        raise BenchError(f"Oracle not found: {oracle_path}")
    problems = compare_with_oracle(result, read_oracle(oracle_path))
    if problems:
        raise VerificationError("; ".join(problems))
    logger.info(f"Result matches {oracle_path} ({len(result)} keys)")


@dataclass
class SweepPlan:
    """Strong or weak scaling sweep."""

    mode: str  # "strong" or "weak"
    workers: tuple[int, ...] = DEFAULT_SWEEP_WORKERS
    corpus_size: int = DEFAULT_STRONG_SIZE  # Strong mode
    bytes_per_worker: int = DEFAULT_WEAK_BYTES_PER_WORKER  # Weak mode
    skewed: bool = False
    skew: str = DEFAULT_SWEEP_SKEW
    engines: tuple[str, ...] = ("1s", "2s")
    reps: int = 1
    task_size: int | None = None
    zipf_s: float = 1.1
    seed: int = 42

    def validate(self) -> list[str]:
        problems: list[str] = []
        if self.mode not in ("strong", "weak"):
            problems.append(f"mode must be strong or weak, got {self.mode!r}")
        if not self.workers or any(w < 1 for w in self.workers):
            problems.append(f"invalid workers list {self.workers}")
        if self.corpus_size < 0 or self.bytes_per_worker < 0:
            problems.append("corpus sizes must not be negative")
        unknown = [e for e in self.engines if e.lower() not in ENGINES]
        if unknown:
            problems.append(f"unknown engines {unknown}")
        if self.reps < 1:
            problems.append(f"reps must be at least 1, got {self.reps}")
        return problems

    def points(self) -> list[tuple[int, int]]:
        """(workers, corpus bytes) per sweep point."""
        if self.mode == "strong":
            return [(w, self.corpus_size) for w in self.workers]
        return [(w, w * self.bytes_per_worker) for w in self.workers]


def run_sweep(
    plan: SweepPlan,
    base: JobConfig,
    workdir: Path,
    sink: CsvSink,
    sampler_factory: Callable[[], MemorySampler | None] = PsutilMemorySampler,
) -> list[JobSummary]:
    """Run every engine at every sweep point, generating corpora as needed.

    Corpora are cached in workdir by size, seed and skew parameter.
    """
    problems = plan.validate()
    if problems:
        raise BenchError("; ".join(problems))
    workdir.mkdir(parents=True, exist_ok=True)
    profile = _sweep_profile(plan)
    summaries: list[JobSummary] = []
    for num_workers, corpus_bytes in plan.points():
        corpus = workdir / f"corpus-{corpus_bytes}-s{plan.zipf_s}-seed{plan.seed}.txt"
        if not corpus.exists():
            generate_corpus(
                CorpusSpec(size=corpus_bytes, zipf_s=plan.zipf_s, seed=plan.seed), corpus
            )
        cfg = dataclasses.replace(
            base, filename=corpus, num_workers=num_workers, skew_profile=profile
        )
        task_size = scaled_task_size(corpus_bytes, num_workers, plan.task_size)
        if task_size is not None:
            cfg.task_size = task_size
        scale_to_corpus(cfg, corpus_bytes, explicit={"task_size"})
        for engine in plan.engines:
            logger.info(
                f"Sweep point: {engine} with {num_workers} workers, {corpus_bytes} bytes, "
                f"skew {profile}"
            )
            summaries += run_repetitions(
                engine, cfg, plan.reps, sink, sampler_factory=sampler_factory
            )
    return summaries


def _sweep_profile(plan: SweepPlan) -> SkewProfile:
    return parse_skew(plan.skew) if plan.skewed else SkewProfile()
