"""Shared job machinery for both engines.

This module provides:
- WorkerStatus: the per-worker state machine published in the Status window
- JobHooks: optional callbacks used by tests and the restart harness
- WorkerTimeline / JobSummary: per-phase timings and the job result
- MapReduceJob: runs one worker per thread over a LocalTransport and turns
  the first worker failure into a job abort
"""

from __future__ import annotations

import logging
import math
import threading
import time
from abc import ABC, abstractmethod
from collections.abc import Iterator
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Any, Callable, Generic, TypeVar

from .config import JobConfig
from .dataset import TaskDescriptor, counts_digest
from .memory import MemorySampler
from .rma import JobAbortedError, LocalTransport, RmaContext, WindowId
from .usecase import UseCase

logger = logging.getLogger(__name__)

V = TypeVar("V")


class EngineError(Exception):
    """A worker failed and the job was aborted."""


class InvariantError(Exception):
    """An internal invariant was violated."""


class WorkerStatus(IntEnum):
    """Status word values; INIT is the zero-filled window before Map starts."""

    INIT = 0
    MAP = 1
    REDUCE = 2
    COMBINE = 3
    DONE = 4


class Phase(Enum):
    MAP = "map"
    REDUCE = "reduce"
    COMBINE = "combine"


@dataclass
class JobHooks:
    """Optional callbacks invoked from worker threads.

    Exceptions raised by a hook fail the calling worker and abort the job.
    """

    on_status_change: Callable[[int, WorkerStatus], None] | None = None
    on_task_complete: Callable[[int, TaskDescriptor], None] | None = None
    before_append: Callable[[int, int], None] | None = None  # (emitter rank, target rank)


@dataclass
class PhaseSpan:
    start: float
    end: float = math.nan

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass
class WorkerTimeline:
    """Monotonic phase boundaries of one worker."""

    rank: int
    start: float = 0.0  # End of initialisation
    phases: dict[Phase, PhaseSpan] = field(default_factory=dict)

    @contextmanager
    def phase(self, phase: Phase) -> Iterator[PhaseSpan]:
        span = PhaseSpan(time.monotonic())
        self.phases[phase] = span
        try:
            yield span
        finally:
            span.end = time.monotonic()

    def shifted(self, origin: float) -> WorkerTimeline:
        """Copy with times relative to origin."""
        return WorkerTimeline(
            rank=self.rank,
            start=self.start - origin,
            phases={
                p: PhaseSpan(s.start - origin, s.end - origin) for p, s in self.phases.items()
            },
        )


@dataclass
class WorkerStats:
    """Counters kept by one worker."""

    tasks_run: int = 0
    map_passes: int = 0
    emitted: int = 0
    records_appended: int = 0
    ownership_transfers: int = 0
    buckets_attached: int = 0
    bytes_pulled: int = 0
    run0_keys: int = 0


@dataclass
class WorkerOutcome(Generic[V]):
    rank: int
    timeline: WorkerTimeline
    stats: WorkerStats
    result: list[tuple[bytes, V]] | None = None  # Rank 0 only


@dataclass
class JobSummary:
    """Result and measurements of one job."""

    engine: str
    num_workers: int
    corpus_bytes: int
    task_size: int
    chunk_size: int
    skew: str
    checkpoint: bool
    t_map_s: float
    t_reduce_s: float
    t_combine_s: float
    t_total_s: float
    peak_mem_bytes: int | None
    result: list[tuple[bytes, Any]]
    result_digest: str
    barriers: int
    peak_phase: str | None = None
    timelines: dict[int, WorkerTimeline] = field(default_factory=dict)
    stats: dict[int, WorkerStats] = field(default_factory=dict)
    resumed_from: str | None = None

    @property
    def ownership_transfers(self) -> int:
        return sum(s.ownership_transfers for s in self.stats.values())


class MapReduceJob(ABC, Generic[V]):
    """Base class for the engines.

    Subclasses implement run_worker(); run() spawns one thread per rank,
    aborts the transport on the first failure and assembles the summary.
    """

    engine = ""

    def __init__(
        self,
        cfg: JobConfig,
        uc: UseCase[V],
        hooks: JobHooks | None = None,
        sampler: MemorySampler | None = None,
    ):
        cfg.require_valid()
        self.cfg = cfg
        self.uc = uc
        self.hooks = hooks or JobHooks()
        self.sampler = sampler
        self.file_len = 0
        self._status: list[WorkerStatus] = []
        self.transport: LocalTransport | None = None
        self.resumed_from: str | None = None

    def run(self) -> JobSummary:
        """Run the job to completion.

        Raises:
            EngineError: If any worker failed
        """
        if not self.cfg.filename.is_file():
            raise EngineError(f"input file not found: {self.cfg.filename}")
        self.file_len = self.cfg.filename.stat().st_size
        early = self.prepare()
        if early is not None:
            return early

        num_workers = self.cfg.num_workers
        transport = LocalTransport(num_workers)
        self.transport = transport
        self._status = [WorkerStatus.INIT] * num_workers
        outcomes: dict[int, WorkerOutcome[V]] = {}
        errors: list[tuple[int, BaseException]] = []

        logger.info(
            f"Starting {self.engine} job: {num_workers} workers, "
            f"{self.file_len} bytes, task size {self.cfg.task_size}"
        )
        if self.sampler:
            self.sampler.start()
        try:
            threads = [
                threading.Thread(
                    target=self._worker_main,
                    args=(transport.context(rank), outcomes, errors),
                    name=f"worker-{rank}",
                )
                for rank in range(num_workers)
            ]
            for thread in threads:
                thread.start()
            for thread in threads:
                thread.join()
        finally:
            if self.sampler:
                self.sampler.stop()

        if errors:
            rank, error = next(
                ((r, e) for r, e in errors if not isinstance(e, JobAbortedError)), errors[0]
            )
            raise EngineError(f"{self.engine} job aborted, rank {rank} failed: {error}") from error

        return self._summarize(outcomes, transport.barrier_count)

    def _worker_main(
        self,
        ctx: RmaContext,
        outcomes: dict[int, WorkerOutcome[V]],
        errors: list[tuple[int, BaseException]],
    ) -> None:
        try:
            outcomes[ctx.rank] = self.run_worker(ctx)
        except BaseException as e:
            if not isinstance(e, JobAbortedError):
                logger.error(f"rank {ctx.rank}: {type(e).__name__}: {e}")
            errors.append((ctx.rank, e))
            ctx.transport.abort(f"rank {ctx.rank}: {e}")

    def prepare(self) -> JobSummary | None:
        """Called once before workers start; a returned summary ends the job early."""
        return None

    @abstractmethod
    def run_worker(self, ctx: RmaContext) -> WorkerOutcome[V]:
        """Body of one worker."""

    def publish_status(self, ctx: RmaContext, status: WorkerStatus) -> None:
        """Publish a strictly greater status in the worker's Status window."""
        current = self._status[ctx.rank]
        if status <= current:
            raise InvariantError(
                f"rank {ctx.rank}: status may not go from {current.name} to {status.name}"
            )
        ctx.atomic_replace(ctx.rank, WindowId.STATUS, 0, int(status))
        self._status[ctx.rank] = status
        logger.info(f"rank {ctx.rank}: {current.name} -> {status.name}")
        if self.sampler:
            self.sampler.set_phase(status.name.lower())
        if self.hooks.on_status_change:
            self.hooks.on_status_change(ctx.rank, status)

    def fold(self, table: dict[bytes, V], key: bytes, value: V) -> None:
        """Insert into a reduce table, combining with uc.reduce."""
        if key in table:
            table[key] = self.uc.reduce(key, table[key], value)
        else:
            table[key] = value

    def _summarize(
        self,
        outcomes: dict[int, WorkerOutcome[V]],
        barriers: int,
        result: list[tuple[bytes, V]] | None = None,
    ) -> JobSummary:
        timelines = [o.timeline for o in outcomes.values()]
        origin = min((t.start for t in timelines), default=0.0)
        shifted = {t.rank: t.shifted(origin) for t in timelines}

        def spans(phase: Phase) -> list[PhaseSpan]:
            return [t.phases[phase] for t in shifted.values() if phase in t.phases]

        def width(phase: Phase) -> float:
            found = spans(phase)
            if not found:
                return 0.0
            return max(s.end for s in found) - min(s.start for s in found)

        map_spans = spans(Phase.MAP)
        ends = [s.end for p in Phase for s in spans(p)]
        if result is None:
            result = outcomes[0].result or []

        peak = self.sampler.peak() if self.sampler else None
        if peak is not None and peak.phase != "combine":
            logger.info(f"Peak memory {peak} (not in combine)")

        summary = JobSummary(
            engine=self.engine,
            num_workers=self.cfg.num_workers,
            corpus_bytes=self.file_len,
            task_size=self.cfg.task_size,
            chunk_size=self.cfg.chunk_size,
            skew=str(self.cfg.skew_profile),
            checkpoint=self.cfg.checkpoint is not None,
            t_map_s=max((s.end for s in map_spans), default=0.0),
            t_reduce_s=width(Phase.REDUCE),
            t_combine_s=width(Phase.COMBINE),
            t_total_s=max(ends, default=0.0),
            peak_mem_bytes=peak.rss_bytes if peak else None,
            peak_phase=peak.phase if peak else None,
            result=result,
            result_digest=counts_digest(result),
            barriers=barriers,
            timelines=shifted,
            stats={rank: o.stats for rank, o in outcomes.items()},
            resumed_from=self.resumed_from,
        )
        logger.info(
            f"{self.engine} job done in {summary.t_total_s:.3f}s "
            f"(map {summary.t_map_s:.3f}s, reduce {summary.t_reduce_s:.3f}s, "
            f"combine {summary.t_combine_s:.3f}s), {len(result)} keys"
        )
        return summary
