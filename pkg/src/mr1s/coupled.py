"""Coupled MapReduce engine (reference baseline).

Same use case, codec and Local Reduce as the decoupled engine, but phases
are separated by global synchronisation:

1. rank 0 scatters one task per worker per round
2. each round starts with a barrier and a synchronised read
3. a barrier ends Map everywhere
4. bucket bytes are exchanged all-to-all with two-sided messages
5. received records are reduced into a level-0 run
6. the same merge tree as the decoupled engine, over send/recv
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from typing import TypeVar, cast

from .combine import (
    CombineRun,
    StepKind,
    check_run,
    combine_schedule,
    decode_run,
    encode_run,
    merge_runs,
    run_from_table,
)
from .config import JobConfig
from .dataset import TaskDescriptor, split_tasks
from .decoupled import STATUS_SIZE, local_reduce_insert
from .job import (
    JobHooks,
    JobSummary,
    MapReduceJob,
    Phase,
    WorkerOutcome,
    WorkerStats,
    WorkerStatus,
    WorkerTimeline,
)
from .kvcodec import encode_record, iterate_records, route
from .memory import MemorySampler
from .rma import ProtocolError, RmaContext, WindowId
from .tasks import InputReader
from .usecase import UseCase

logger = logging.getLogger(__name__)

V = TypeVar("V")

SCATTER_TAG = "scatter"
COUNTS_TAG = "alltoall-counts"
DATA_TAG = "alltoall-data"
COMBINE_TAG = "combine"


@dataclass
class ExchangePlan:
    """Byte counts of one all-to-all exchange, seen from one worker."""

    send_counts: list[int]
    recv_counts: list[int]
    offsets: list[int] = field(default_factory=list)  # Of each source in the receive buffer

    def __post_init__(self) -> None:
        if not self.offsets:
            at = 0
            for count in self.recv_counts:
                self.offsets.append(at)
                at += count

    @property
    def total_received(self) -> int:
        return sum(self.recv_counts)


def exchange_alltoall(ctx: RmaContext, buckets: list[bytes]) -> tuple[ExchangePlan, list[bytes]]:
    """Send buckets[t] to every rank t and receive what every rank sent here.

    Counts travel first; a payload whose length differs from its announced
    count is a protocol error.
    """
    transport = ctx.transport
    num_workers = ctx.num_workers
    if len(buckets) != num_workers:
        raise ProtocolError(f"expected {num_workers} buckets, got {len(buckets)}")

    for target in range(num_workers):
        transport.send(ctx.rank, target, COUNTS_TAG, len(buckets[target]))
    recv_counts = [
        cast(int, transport.recv(ctx.rank, source, COUNTS_TAG)) for source in range(num_workers)
    ]
    plan = ExchangePlan(send_counts=[len(b) for b in buckets], recv_counts=recv_counts)

    for target in range(num_workers):
        transport.send(ctx.rank, target, DATA_TAG, bytes(buckets[target]))
    received: list[bytes] = []
    for source in range(num_workers):
        data = cast(bytes, transport.recv(ctx.rank, source, DATA_TAG))
        if len(data) != plan.recv_counts[source]:
            raise ProtocolError(
                f"rank {ctx.rank}: rank {source} announced {plan.recv_counts[source]} bytes, "
                f"sent {len(data)}"
            )
        received.append(data)
    return plan, received


class CoupledWorker:
    """One worker of a coupled job."""

    def __init__(self, job: CoupledEngine[V], ctx: RmaContext):
        self.job = job
        self.ctx = ctx
        self.rank = ctx.rank
        self.cfg = job.cfg
        self.uc: UseCase[V] = job.uc
        self.num_workers = ctx.num_workers
        self.timeline = WorkerTimeline(self.rank)
        self.stats = WorkerStats()
        self.table: dict[bytes, V] = {}
        self.buckets = [bytearray() for _ in range(self.num_workers)]

    def _scatter(self, round_index: int) -> TaskDescriptor | None:
        """Rank 0 hands out task round_index * P + w to worker w."""
        transport = self.ctx.transport
        if self.rank != 0:
            return cast("TaskDescriptor | None", transport.recv(self.rank, 0, SCATTER_TAG))
        own: TaskDescriptor | None = None
        for worker in range(self.num_workers):
            index = round_index * self.num_workers + worker
            task = None
            if index < len(self.job.tasks):
                task = dataclasses.replace(
                    self.job.tasks[index],
                    repeat=self.cfg.skew_profile.repeat_for(worker, index),
                )
            if worker == 0:
                own = task
            else:
                transport.send(0, worker, SCATTER_TAG, task)
        return own

    def _emit(self, key: bytes, value: V) -> None:
        self.stats.emitted += 1
        local_reduce_insert(self.table, key, value, self.uc)
        if len(self.table) > self.cfg.local_reduce_limit:
            self._drain()

    def _drain(self) -> None:
        for key, value in self.table.items():
            record = encode_record(key, self.uc.encode_value(value))
            self.buckets[route(key, self.num_workers)] += record
            self.stats.records_appended += 1
        self.table.clear()

    def _map_task(self, reader: InputReader, task: TaskDescriptor) -> None:
        task_input = reader.read(task)
        scratch: dict[bytes, V] = {}

        def discard(key: bytes, value: V) -> None:
            local_reduce_insert(scratch, key, value, self.uc)

        for n in range(task.repeat):
            if self.cfg.task_delay_s:
                time.sleep(self.cfg.task_delay_s)
            self.uc.map(task_input, self._emit if n == 0 else discard)
            scratch.clear()
            self.stats.map_passes += 1
        self._drain()
        self.stats.tasks_run += 1
        if self.job.hooks.on_task_complete:
            self.job.hooks.on_task_complete(self.rank, task)

    def map_phase(self) -> None:
        with self.timeline.phase(Phase.MAP):
            self.job.publish_status(self.ctx, WorkerStatus.MAP)
            rounds = -(-len(self.job.tasks) // self.num_workers)
            with InputReader(
                self.cfg.filename, self.cfg.boundary_overlap, self.cfg.read_delay_s
            ) as reader:
                for round_index in range(rounds):
                    task = self._scatter(round_index)
                    self.ctx.barrier()
                    if task is not None:
                        self._map_task(reader, task)
            self.ctx.barrier()

    def reduce_phase(self) -> CombineRun[V]:
        with self.timeline.phase(Phase.REDUCE):
            self.job.publish_status(self.ctx, WorkerStatus.REDUCE)
            plan, received = exchange_alltoall(self.ctx, [bytes(b) for b in self.buckets])
            self.buckets = []
            self.ctx.barrier()
            self.stats.bytes_pulled = plan.total_received
            table: dict[bytes, V] = {}
            for data in received:
                for record in iterate_records(data):
                    self.job.fold(table, record.key, self.uc.decode_value(record.value))
            run = run_from_table(table)
            check_run(run, 0)
            self.stats.run0_keys = len(run)
            self.ctx.barrier()
        return run

    def combine_phase(self, run: CombineRun[V]) -> CombineRun[V] | None:
        transport = self.ctx.transport
        with self.timeline.phase(Phase.COMBINE):
            self.job.publish_status(self.ctx, WorkerStatus.COMBINE)
            for step in combine_schedule(self.rank, self.num_workers):
                assert step.partner is not None or step.kind is StepKind.PASS
                if step.kind is StepKind.MERGE:
                    data = cast(bytes, transport.recv(self.rank, step.partner, COMBINE_TAG))
                    partner_run = decode_run(data, self.uc)
                    check_run(partner_run, step.level - 1)
                    run = merge_runs(run, partner_run, self.uc)
                    check_run(run, step.level)
                elif step.kind is StepKind.PUBLISH:
                    transport.send(self.rank, step.partner, COMBINE_TAG, encode_run(run, self.uc))
                    break
        return run if self.rank == 0 else None

    def run(self) -> WorkerOutcome[V]:
        self.ctx.create_window(WindowId.STATUS, STATUS_SIZE)
        self.ctx.barrier()
        self.timeline.start = time.monotonic()
        self.map_phase()
        run = self.reduce_phase()
        result = self.combine_phase(run)
        self.job.publish_status(self.ctx, WorkerStatus.DONE)
        self.ctx.barrier()
        return WorkerOutcome(self.rank, self.timeline, self.stats, result)


class CoupledEngine(MapReduceJob[V]):
    """Coupled engine: scatter, phase barriers, all-to-all, point-to-point combine."""

    engine = "2S"

    def __init__(
        self,
        cfg: JobConfig,
        uc: UseCase[V],
        hooks: JobHooks | None = None,
        sampler: MemorySampler | None = None,
    ):
        super().__init__(cfg, uc, hooks, sampler)
        self.tasks: list[TaskDescriptor] = []

    def prepare(self) -> JobSummary | None:
        if self.cfg.checkpoint is not None:
            logger.warning("Checkpoints are only taken by the decoupled engine; ignoring")
        self.tasks = split_tasks(self.file_len, self.cfg.task_size)
        return None

    def run_worker(self, ctx: RmaContext) -> WorkerOutcome[V]:
        return CoupledWorker(self, ctx).run()


def run_job_2s(
    cfg: JobConfig,
    uc: UseCase[V],
    hooks: JobHooks | None = None,
    sampler: MemorySampler | None = None,
) -> JobSummary:
    """Run a job on the coupled engine."""
    return CoupledEngine(cfg, uc, hooks, sampler).run()
