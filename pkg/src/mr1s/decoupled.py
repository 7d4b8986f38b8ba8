"""Decoupled MapReduce engine.

Workers never wait for each other between the two job barriers:

- Map: tasks are self-scheduled round-robin, the next task's input is
  prefetched while the current one is mapped, and pairs are pre-aggregated
  in a Local Reduce table before they are appended to the bucket chain of
  their target worker in the emitter's own Key-Value window.
- Reduce: as soon as a worker finishes its own Map it seals and pulls the
  buckets every peer keeps for it. An emitter that finds its target's
  bucket sealed keeps the pairs in its own bucket (ownership transfer);
  they are merged during Combine.
- Combine: sorted runs are merged up a binary tree; a partner's run is
  readable once the partner releases the exclusive Combine lock it took
  during initialisation.

Window layout per worker:
- STATUS: one status word
- KEYVALUE: one bucket chain per target rank (see kvcodec for the layout)
- KV_DISPLACEMENT: (head displacement, head capacity) per target rank
- COMBINE: encoded runs
- COMBINE_DISPLACEMENT: (displacement, length) of the level-0 run and of the
  published final run
"""

from __future__ import annotations

import logging
import struct
import time
from collections import defaultdict
from dataclasses import dataclass
from enum import Enum
from typing import TypeVar

from .checkpoint import (
    CheckpointPhase,
    CheckpointSet,
    ResumeMode,
    ResumePoint,
    WindowImage,
    recover_job,
)
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
from .job import (
    InvariantError,
    JobHooks,
    JobSummary,
    MapReduceJob,
    Phase,
    WorkerOutcome,
    WorkerStats,
    WorkerStatus,
    WorkerTimeline,
)
from .kvcodec import (
    BUCKET_OVERHEAD,
    CONTROL_SIZE,
    LINK,
    LINK_SIZE,
    MIN_BUCKET_SIZE,
    SEAL_BIT,
    ControlWord,
    encode_record,
    iterate_records,
    link_offset,
    record_capacity,
    route,
)
from .memory import MemorySampler
from .rma import LockKind, RmaContext, Window, WindowId, align_up
from .tasks import InputReader, assigned_tasks
from .usecase import TaskInput, UseCase

logger = logging.getLogger(__name__)

V = TypeVar("V")

ENTRY = struct.Struct("<QQ")
RUN0_SLOT = 0
FINAL_SLOT = 1
STATUS_SIZE = 8


class AppendResult(Enum):
    APPENDED = "appended"
    SEALED = "sealed"


@dataclass
class Bucket:
    displacement: int
    capacity: int
    committed: int = 0


def local_reduce_insert(table: dict[bytes, V], key: bytes, value: V, uc: UseCase[V]) -> None:
    """Insert into a Local Reduce table, combining with uc.reduce_local."""
    if key in table:
        table[key] = uc.reduce_local(key, table[key], value)
    else:
        table[key] = value


def head_bucket_size(bucket_size: int, num_workers: int) -> int:
    """Size of each target's first bucket inside the initial Key-Value region."""
    return max(bucket_size // num_workers // 8 * 8, MIN_BUCKET_SIZE)


class BucketChain:
    """Owner-side view of the buckets one worker fills for one target.

    Only the owner appends; the target's reducer is the only other party
    touching the control words, and only to set the seal bit.
    """

    def __init__(
        self,
        ctx: RmaContext,
        window: Window,
        target: int,
        buckets: list[Bucket],
        max_bucket_size: int,
        stats: WorkerStats | None = None,
    ):
        self.ctx = ctx
        self.window = window
        self.target = target
        self.buckets = buckets
        self.max_bucket_size = max_bucket_size
        self.stats = stats or WorkerStats()

    @classmethod
    def recover(
        cls,
        ctx: RmaContext,
        window: Window,
        target: int,
        head: tuple[int, int],
        max_bucket_size: int,
        stats: WorkerStats | None = None,
    ) -> BucketChain:
        """Rebuild a chain from restored window contents, clearing seal bits."""
        buckets: list[Bucket] = []
        displacement, capacity = head
        while True:
            control = ControlWord.unpack(window.atomic_fetch(displacement))
            if control.sealed:
                unsealed = ControlWord(control.committed, control.linked)
                window.atomic_replace(displacement, unsealed.pack())
            buckets.append(Bucket(displacement, capacity, control.committed))
            if not control.linked:
                break
            displacement, capacity = LINK.unpack(
                window.read(link_offset(displacement, capacity), LINK_SIZE)
            )
        return cls(ctx, window, target, buckets, max_bucket_size, stats)

    @property
    def tail(self) -> Bucket:
        return self.buckets[-1]

    @property
    def committed(self) -> int:
        return sum(b.committed for b in self.buckets)

    def append(self, records: list[bytes]) -> list[bytes]:
        """Append encoded records; returns those left over once the chain is sealed."""
        i = 0
        while i < len(records):
            space = record_capacity(self.tail.capacity) - self.tail.committed
            j, size = i, 0
            while j < len(records) and size + len(records[j]) <= space:
                size += len(records[j])
                j += 1
            if j == i:
                if not self._extend(len(records[i])):
                    return records[i:]
                continue
            if self.seal_aware_append(b"".join(records[i:j])) is AppendResult.SEALED:
                return records[i:]
            i = j
        return []

    def seal_aware_append(self, payload: bytes) -> AppendResult:
        """Write payload past the committed bytes, then publish it with one CAS.

        The CAS can only fail because the reducer set the seal bit, in which
        case nothing becomes visible.
        """
        tail = self.tail
        if tail.committed + len(payload) > record_capacity(tail.capacity):
            raise ValueError(f"payload of {len(payload)} bytes does not fit the tail bucket")
        self.window.write(tail.displacement + CONTROL_SIZE + tail.committed, payload)
        expected = ControlWord(tail.committed).pack()
        desired = ControlWord(tail.committed + len(payload)).pack()
        prior = self.ctx.compare_and_swap(
            self.ctx.rank, WindowId.KEYVALUE, tail.displacement, expected, desired
        )
        if prior != expected:
            self._expect_sealed(prior)
            return AppendResult.SEALED
        tail.committed += len(payload)
        return AppendResult.APPENDED

    def _extend(self, needed: int) -> bool:
        """Link a new bucket behind the tail; False if the tail was sealed first."""
        tail = self.tail
        size = max(
            min(2 * tail.capacity, self.max_bucket_size),
            align_up(needed + BUCKET_OVERHEAD),
        )
        # Regions are never detached; a region orphaned by a lost race stays empty
        displacement = self.ctx.attach_region(WindowId.KEYVALUE, size)
        link = LINK.pack(displacement, size)
        self.window.write(link_offset(tail.displacement, tail.capacity), link)
        expected = ControlWord(tail.committed).pack()
        prior = self.ctx.compare_and_swap(
            self.ctx.rank,
            WindowId.KEYVALUE,
            tail.displacement,
            expected,
            ControlWord(tail.committed, linked=True).pack(),
        )
        if prior != expected:
            self._expect_sealed(prior)
            return False
        self.buckets.append(Bucket(displacement, size))
        self.stats.buckets_attached += 1
        logger.debug(
            f"rank {self.ctx.rank}: bucket for rank {self.target} extended "
            f"({size} bytes at {displacement})"
        )
        return True

    def _expect_sealed(self, prior: int) -> None:
        if not ControlWord.unpack(prior).sealed:
            raise InvariantError(
                f"rank {self.ctx.rank}: bucket for rank {self.target} changed "
                f"under its owner (control {prior:#x})"
            )


def pull_bucket_chain(
    ctx: RmaContext, emitter: int, chunk_size: int
) -> tuple[list[bytes], int]:
    """Seal and read the buckets emitter keeps for this worker.

    Returns the record bytes of each bucket (exactly the committed length the
    sealing fetch returned) and the number of bytes read.
    """
    ctx.lock(emitter, WindowId.KV_DISPLACEMENT, LockKind.SHARED)
    try:
        displacement, capacity = ENTRY.unpack(
            ctx.get(emitter, WindowId.KV_DISPLACEMENT, ctx.rank * ENTRY.size, ENTRY.size)
        )
    finally:
        ctx.unlock(emitter, WindowId.KV_DISPLACEMENT)

    pieces: list[bytes] = []
    pulled = 0
    ctx.lock(emitter, WindowId.KEYVALUE, LockKind.SHARED)
    try:
        while True:
            control = ControlWord.unpack(
                ctx.fetch_or(emitter, WindowId.KEYVALUE, displacement, SEAL_BIT)
            )
            data = ctx.get_chunked(
                emitter,
                WindowId.KEYVALUE,
                displacement + CONTROL_SIZE,
                control.committed,
                chunk_size,
            )
            pieces.append(data)
            pulled += len(data)
            if not control.linked:
                break
            displacement, capacity = LINK.unpack(
                ctx.get(emitter, WindowId.KEYVALUE, link_offset(displacement, capacity), LINK_SIZE)
            )
    finally:
        ctx.unlock(emitter, WindowId.KEYVALUE)
    return pieces, pulled


class DecoupledWorker:
    """One worker of a decoupled job."""

    def __init__(self, job: DecoupledEngine[V], ctx: RmaContext):
        self.job = job
        self.ctx = ctx
        self.rank = ctx.rank
        self.cfg: JobConfig = job.cfg
        self.uc: UseCase[V] = job.uc
        self.hooks: JobHooks = job.hooks
        self.num_workers = ctx.num_workers
        self.timeline = WorkerTimeline(self.rank)
        self.stats = WorkerStats()
        self.table: dict[bytes, V] = {}
        self.chains: list[BucketChain] = []
        self.reducing = [False] * self.num_workers
        self.completed: set[int] = set()
        self.run0: CombineRun[V] = []
        self.ckpt: CheckpointSet | None = None
        self._combine_initial_free = False
        self.windows: dict[WindowId, Window] = {}

    # Initialisation

    def _open(self, window_id: WindowId, size: int, image: WindowImage | None = None) -> Window:
        if self.ckpt is not None:
            window = self.ckpt.open_window(self.ctx, window_id, size, image)
        elif image is not None:
            window = self.ctx.create_window(window_id, 0)
            for displacement, data in image.regions:
                window.restore_region(displacement, data)
        else:
            window = self.ctx.create_window(window_id, size)
        self.windows[window_id] = window
        return window

    def initialize(self, resume: ResumePoint | None) -> None:
        mode = resume.mode if resume else None
        images = resume.images[self.rank] if resume else {}
        if self.cfg.checkpoint is not None:
            self.ckpt = CheckpointSet(
                self.cfg.checkpoint,
                self.rank,
                self.num_workers,
                self.cfg.task_size,
                self.job.num_tasks,
                resume.bitmap(self.rank) if resume else None,
            )
        if resume is not None:
            self.completed = resume.completed_tasks(self.rank)

        self._open(WindowId.STATUS, STATUS_SIZE)

        if mode is None:
            head = head_bucket_size(self.cfg.bucket_size, self.num_workers)
            kv = self._open(WindowId.KEYVALUE, head * self.num_workers)
            kv_disp = self._open(WindowId.KV_DISPLACEMENT, ENTRY.size * self.num_workers)
            for target in range(self.num_workers):
                kv_disp.write(target * ENTRY.size, ENTRY.pack(target * head, head))
                self.chains.append(
                    BucketChain(
                        self.ctx, kv, target, [Bucket(target * head, head)],
                        self.cfg.bucket_size, self.stats,
                    )
                )
        else:
            kv = self._open(WindowId.KEYVALUE, 0, images[WindowId.KEYVALUE])
            kv_disp = self._open(WindowId.KV_DISPLACEMENT, 0, images[WindowId.KV_DISPLACEMENT])
            for target in range(self.num_workers):
                head_entry = ENTRY.unpack(kv_disp.read(target * ENTRY.size, ENTRY.size))
                self.chains.append(
                    BucketChain.recover(
                        self.ctx, kv, target, head_entry, self.cfg.bucket_size, self.stats
                    )
                )

        if mode is ResumeMode.COMBINE:
            combine = self._open(WindowId.COMBINE, 0, images[WindowId.COMBINE])
            combine_disp = self._open(
                WindowId.COMBINE_DISPLACEMENT, 0, images[WindowId.COMBINE_DISPLACEMENT]
            )
            displacement, length = ENTRY.unpack(
                combine_disp.read(RUN0_SLOT * ENTRY.size, ENTRY.size)
            )
            self.run0 = decode_run(combine.read(displacement, length), self.uc)
        else:
            self._open(WindowId.COMBINE, self.cfg.win_size)
            self._open(WindowId.COMBINE_DISPLACEMENT, 2 * ENTRY.size)
            self._combine_initial_free = self.cfg.win_size > 0

        self.ctx.lock(self.rank, WindowId.COMBINE, LockKind.EXCLUSIVE)

    # Map

    def _emit(self, key: bytes, value: V) -> None:
        self.stats.emitted += 1
        local_reduce_insert(self.table, key, value, self.uc)
        if len(self.table) > self.cfg.local_reduce_limit:
            self._drain()

    def _refresh_reducing(self) -> None:
        for target in range(self.num_workers):
            if target != self.rank and not self.reducing[target]:
                status = self.ctx.atomic_fetch(target, WindowId.STATUS, 0)
                self.reducing[target] = status >= WorkerStatus.REDUCE

    def _drain(self) -> None:
        """Move the Local Reduce table into bucket chains."""
        if not self.table:
            return
        by_target: defaultdict[int, list[bytes]] = defaultdict(list)
        for key, value in self.table.items():
            by_target[route(key, self.num_workers)].append(
                encode_record(key, self.uc.encode_value(value))
            )
        self.table.clear()

        self._refresh_reducing()
        transferred: list[bytes] = []
        for target in sorted(by_target):
            records = by_target[target]
            if target != self.rank and self.reducing[target]:
                transferred += records
                continue
            if self.hooks.before_append:
                self.hooks.before_append(self.rank, target)
            left = self.chains[target].append(records)
            self.stats.records_appended += len(records) - len(left)
            if left:
                self.reducing[target] = True
                transferred += left

        if transferred:
            logger.debug(f"rank {self.rank}: keeping {len(transferred)} pairs of reducing targets")
            self.stats.ownership_transfers += len(transferred)
            if self.chains[self.rank].append(transferred):
                raise InvariantError(f"rank {self.rank}: own bucket sealed during Map")

    def _run_task(self, task_input: TaskInput, repeat: int) -> None:
        scratch: dict[bytes, V] = {}

        def discard(key: bytes, value: V) -> None:
            local_reduce_insert(scratch, key, value, self.uc)

        for n in range(repeat):
            if self.cfg.task_delay_s:
                time.sleep(self.cfg.task_delay_s)
            self.uc.map(task_input, self._emit if n == 0 else discard)
            scratch.clear()
            self.stats.map_passes += 1
        self._drain()

    def map_phase(self) -> None:
        with self.timeline.phase(Phase.MAP):
            self.job.publish_status(self.ctx, WorkerStatus.MAP)
            tasks = [
                t for t in assigned_tasks(self.rank, self.cfg, self.job.file_len)
                if t.index not in self.completed
            ]
            if not tasks:
                return
            with InputReader(
                self.cfg.filename, self.cfg.boundary_overlap, self.cfg.read_delay_s
            ) as reader:
                pending = reader.prefetch(tasks[0])
                for i, task in enumerate(tasks):
                    task_input = reader.complete_read(pending)
                    if i + 1 < len(tasks):
                        pending = reader.prefetch(tasks[i + 1])
                    self._run_task(task_input, task.repeat)
                    self.stats.tasks_run += 1
                    if self.ckpt is not None:
                        self.ckpt.mark_task_complete(task.index)
                        self.ckpt.sync(CheckpointPhase.MAP)
                    if self.cfg.redundant_lock_opt:
                        self._cycle_locks()
                    if self.hooks.on_task_complete:
                        self.hooks.on_task_complete(self.rank, task)

    def _cycle_locks(self) -> None:
        for window_id in WindowId:
            if not self.ctx.holds_lock(self.rank, window_id):
                self.ctx.lock(self.rank, window_id, LockKind.SHARED)
                self.ctx.unlock(self.rank, window_id)

    # Reduce

    def reduce_phase(self) -> None:
        with self.timeline.phase(Phase.REDUCE):
            self.job.publish_status(self.ctx, WorkerStatus.REDUCE)
            table: dict[bytes, V] = {}
            for emitter in range(self.num_workers):
                pieces, pulled = pull_bucket_chain(self.ctx, emitter, self.cfg.chunk_size)
                self.stats.bytes_pulled += pulled
                for data in pieces:
                    for record in iterate_records(data):
                        self.job.fold(table, record.key, self.uc.decode_value(record.value))
            self.run0 = run_from_table(table)
            check_run(self.run0, 0)
            self.stats.run0_keys = len(self.run0)
            self._store_run(self.run0, RUN0_SLOT)
            if self.ckpt is not None:
                self.ckpt.sync(CheckpointPhase.REDUCED)
            if self.cfg.redundant_lock_opt:
                self._cycle_locks()

    # Combine

    def _store_run(self, pairs: CombineRun[V], slot: int) -> None:
        data = encode_run(pairs, self.uc)
        combine = self.windows[WindowId.COMBINE]
        if not data:
            displacement = 0
        elif self._combine_initial_free and len(data) <= self.cfg.win_size:
            displacement = 0
            self._combine_initial_free = False
        else:
            displacement = combine.attach(len(data))
        combine.write(displacement, data)
        self.windows[WindowId.COMBINE_DISPLACEMENT].write(
            slot * ENTRY.size, ENTRY.pack(displacement, len(data))
        )

    def _fetch_run(self, partner: int, level: int) -> CombineRun[V]:
        """Read partner's published run; blocks until the partner has published."""
        ctx = self.ctx
        ctx.lock(partner, WindowId.COMBINE, LockKind.SHARED)
        try:
            ctx.lock(partner, WindowId.COMBINE_DISPLACEMENT, LockKind.SHARED)
            try:
                displacement, length = ENTRY.unpack(
                    ctx.get(
                        partner, WindowId.COMBINE_DISPLACEMENT, FINAL_SLOT * ENTRY.size, ENTRY.size
                    )
                )
            finally:
                ctx.unlock(partner, WindowId.COMBINE_DISPLACEMENT)
            data = ctx.get_chunked(
                partner, WindowId.COMBINE, displacement, length, self.cfg.chunk_size
            )
        finally:
            ctx.unlock(partner, WindowId.COMBINE)
        run = decode_run(data, self.uc)
        check_run(run, level - 1)
        return run

    def combine_phase(self) -> CombineRun[V] | None:
        with self.timeline.phase(Phase.COMBINE):
            self.job.publish_status(self.ctx, WorkerStatus.COMBINE)
            run = self.run0
            for step in combine_schedule(self.rank, self.num_workers):
                if step.kind is StepKind.PUBLISH:
                    break
                if step.kind is StepKind.MERGE:
                    assert step.partner is not None
                    partner_run = self._fetch_run(step.partner, step.level)
                    run = merge_runs(run, partner_run, self.uc)
                    check_run(run, step.level)
                    logger.debug(
                        f"rank {self.rank}: level {step.level} merged rank {step.partner} "
                        f"({len(run)} keys)"
                    )
            self._store_run(run, FINAL_SLOT)
            self.ctx.unlock(self.rank, WindowId.COMBINE)
        return run if self.rank == 0 else None

    def run(self, resume: ResumePoint | None) -> WorkerOutcome[V]:
        try:
            self.initialize(resume)
            self.ctx.barrier()
            self.timeline.start = time.monotonic()

            if resume is None or resume.mode is ResumeMode.MAP:
                self.map_phase()
                self.reduce_phase()
            result = self.combine_phase()
            self.job.publish_status(self.ctx, WorkerStatus.DONE)
            if self.ckpt is not None:
                self.ckpt.sync(CheckpointPhase.DONE)
                self.ckpt.wait()
            self.ctx.barrier()
        finally:
            if self.ckpt is not None:
                self.ckpt.close()
        return WorkerOutcome(self.rank, self.timeline, self.stats, result)


class DecoupledEngine(MapReduceJob[V]):
    """Decoupled engine: two barriers per job, everything else one-sided."""

    engine = "1S"

    def __init__(
        self,
        cfg: JobConfig,
        uc: UseCase[V],
        hooks: JobHooks | None = None,
        sampler: MemorySampler | None = None,
        resume: ResumePoint | None = None,
    ):
        super().__init__(cfg, uc, hooks, sampler)
        self.resume = resume
        self.num_tasks = 0

    def prepare(self) -> JobSummary | None:
        self.num_tasks = -(-self.file_len // self.cfg.task_size)
        checkpoint = self.cfg.checkpoint
        if self.resume is None and checkpoint is not None and checkpoint.recover:
            self.resume = recover_job(self.cfg, self.file_len)
        if self.resume is None:
            return None
        self.resumed_from = self.resume.mode.value
        if self.resume.mode is ResumeMode.DONE:
            return self._stored_result(self.resume)
        return None

    def _stored_result(self, resume: ResumePoint) -> JobSummary:
        images = resume.images[0]
        displacement, length = ENTRY.unpack(
            images[WindowId.COMBINE_DISPLACEMENT].read(FINAL_SLOT * ENTRY.size, ENTRY.size)
        )
        result = decode_run(images[WindowId.COMBINE].read(displacement, length), self.uc)
        logger.info(f"Job already complete, re-emitting {len(result)} stored keys")
        return self._summarize({}, 0, result)

    def run_worker(self, ctx: RmaContext) -> WorkerOutcome[V]:
        return DecoupledWorker(self, ctx).run(self.resume)

    def run(self) -> JobSummary:
        summary = super().run()
        if self.resumed_from != ResumeMode.DONE.value and summary.barriers != 2:
            raise InvariantError(f"decoupled job crossed {summary.barriers} barriers, expected 2")
        return summary


def run_job(
    cfg: JobConfig,
    uc: UseCase[V],
    hooks: JobHooks | None = None,
    sampler: MemorySampler | None = None,
) -> JobSummary:
    """Run a job on the decoupled engine."""
    return DecoupledEngine(cfg, uc, hooks, sampler).run()


