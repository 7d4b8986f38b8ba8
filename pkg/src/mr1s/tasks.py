"""Task scheduling and input retrieval.

Tasks are assigned round-robin by rank. InputReader reads a task's bytes
(plus one lookbehind byte and the boundary overlap) and can prefetch the
next task on a background thread while the current one is mapped.
"""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .config import JobConfig
from .dataset import TaskDescriptor
from .usecase import TaskInput

logger = logging.getLogger(__name__)


def next_task(
    rank: int, cfg: JobConfig, file_len: int, previous: TaskDescriptor | None = None
) -> TaskDescriptor | None:
    """Next task for rank: indices i with i % num_workers == rank, ascending."""
    index = rank if previous is None else previous.index + cfg.num_workers
    offset = index * cfg.task_size
    if offset >= file_len:
        return None
    return TaskDescriptor(
        index=index,
        offset=offset,
        length=min(cfg.task_size, file_len - offset),
        repeat=cfg.skew_profile.repeat_for(rank, index),
    )


def assigned_tasks(rank: int, cfg: JobConfig, file_len: int) -> list[TaskDescriptor]:
    """All tasks rank will run, in order."""
    tasks: list[TaskDescriptor] = []
    task = next_task(rank, cfg, file_len)
    while task is not None:
        tasks.append(task)
        task = next_task(rank, cfg, file_len, task)
    return tasks


@dataclass
class PendingRead:
    """An input read in flight."""

    task: TaskDescriptor
    future: Future[TaskInput]


class InputReader:
    """Reads task input from one file.

    At most one read is outstanding; prefetch() of a new task while one is
    pending is a caller error.
    """

    def __init__(
        self,
        path: Path,
        boundary_overlap: int,
        read_delay_s: float = 0.0,
    ):
        self.path = path
        self.boundary_overlap = boundary_overlap
        self.read_delay_s = read_delay_s
        self._fd = os.open(path, os.O_RDONLY)
        self.file_len = os.fstat(self._fd).st_size
        self._executor = ThreadPoolExecutor(max_workers=1, thread_name_prefix="prefetch")
        self._pending: PendingRead | None = None

    def __enter__(self) -> InputReader:
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()

    def close(self) -> None:
        self._executor.shutdown(wait=True)
        if self._fd >= 0:
            os.close(self._fd)
            self._fd = -1

    def read(self, task: TaskDescriptor) -> TaskInput:
        """Synchronous read of a task's input."""
        if self.read_delay_s:
            time.sleep(self.read_delay_s)
        first = task.offset == 0
        begin = task.offset if first else task.offset - 1
        end = min(task.end + self.boundary_overlap, self.file_len)
        data = os.pread(self._fd, end - begin, begin)
        if len(data) != end - begin:
            raise OSError(f"short read of {self.path} at offset {begin}")
        start = task.offset - begin
        return TaskInput(
            data=data,
            start=start,
            stop=start + task.length,
            first=first,
            at_eof=end == self.file_len,
        )

    def prefetch(self, task: TaskDescriptor) -> PendingRead:
        """Start reading task in the background."""
        if self._pending is not None and not self._pending.future.done():
            raise RuntimeError("a read is already pending")
        pending = PendingRead(task, self._executor.submit(self.read, task))
        self._pending = pending
        return pending

    def complete_read(self, pending: PendingRead) -> TaskInput:
        """Block until the read finishes; I/O errors surface here."""
        try:
            return pending.future.result()
        finally:
            if self._pending is pending:
                self._pending = None
