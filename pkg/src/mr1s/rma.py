"""One-sided communication substrate.

This module provides:
- Window: a registered memory area made of attached regions, addressable by
  (rank, window id, offset)
- Backing / MemoryBacking: where region bytes live (storage backing lives in
  the checkpoint module)
- EpochLock: passive-target lock with SHARED/EXCLUSIVE kinds and FIFO grants
- Transport / LocalTransport: the worker fabric (window registry, barrier,
  two-sided mailboxes for the coupled engine, job abort)
- RmaContext: the per-worker handle exposing put/get, atomics and lock epochs

All workers live in one process; the transport is an interface so another
fabric can be slotted in without touching the engines.
"""

from __future__ import annotations

import bisect
import logging
import struct
import threading
from abc import ABC, abstractmethod
from collections import defaultdict, deque
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import NewType

from .config import ConfigError

logger = logging.getLogger(__name__)

WORD = struct.Struct("<Q")
WORD_SIZE = 8
WORD_MASK = (1 << 64) - 1
REGION_ALIGN = 8

Displacement = NewType("Displacement", int)


class WindowId(IntEnum):
    """Logical windows every worker creates, numbered identically everywhere."""

    STATUS = 0
    KEYVALUE = 1
    COMBINE = 2
    KV_DISPLACEMENT = 3
    COMBINE_DISPLACEMENT = 4


class LockKind(Enum):
    """Passive-target lock kinds."""

    SHARED = "shared"
    EXCLUSIVE = "exclusive"


class RmaError(Exception):
    """Base exception for one-sided communication errors."""


class UsageError(RmaError):
    """Operation issued outside its contract (no epoch, double lock, misalignment)."""


class ProtocolError(RmaError):
    """Access outside attached regions or inconsistent exchange counts."""


class ResourceError(RmaError):
    """Region allocation failed."""


class JobAbortedError(RmaError):
    """Another worker aborted the job while this one was waiting."""


def align_up(value: int, alignment: int = REGION_ALIGN) -> int:
    """Round value up to a multiple of alignment."""
    return (value + alignment - 1) // alignment * alignment


class Backing(ABC):
    """Abstract base class for region storage."""

    @abstractmethod
    def allocate(self, displacement: int, size: int) -> bytearray:
        """Return a zero-filled buffer for a new region."""

    @abstractmethod
    def mark_dirty(self, displacement: int, length: int) -> None:
        """Record that [displacement, displacement+length) was modified."""


class MemoryBacking(Backing):
    """Volatile backing; nothing is tracked."""

    def allocate(self, displacement: int, size: int) -> bytearray:
        return bytearray(size)

    def mark_dirty(self, displacement: int, length: int) -> None:
        pass


@dataclass
class Region:
    """An attached region of a window."""

    displacement: int
    length: int
    buffer: bytearray

    @property
    def end(self) -> int:
        return self.displacement + self.length


@dataclass(eq=False)
class _LockRequest:
    origin: int
    kind: LockKind


class EpochLock:
    """Passive-target lock for one (rank, window).

    EXCLUSIVE excludes every other holder; SHARED excludes only EXCLUSIVE.
    Requests are granted in arrival order: a request waits for every
    incompatible request queued ahead of it.
    """

    def __init__(self) -> None:
        self._cond = threading.Condition()
        self._queue: deque[_LockRequest] = deque()
        self._holders: dict[int, LockKind] = {}
        self._aborted = False

    def _grantable(self, request: _LockRequest) -> bool:
        for ahead in self._queue:
            if ahead is request:
                break
            if request.kind is LockKind.EXCLUSIVE or ahead.kind is LockKind.EXCLUSIVE:
                return False
        if request.kind is LockKind.EXCLUSIVE:
            return not self._holders
        return all(kind is LockKind.SHARED for kind in self._holders.values())

    def acquire(self, origin: int, kind: LockKind) -> None:
        with self._cond:
            if origin in self._holders:
                raise UsageError(f"rank {origin} already holds this lock")
            request = _LockRequest(origin, kind)
            self._queue.append(request)
            try:
                while not self._grantable(request):
                    if self._aborted:
                        raise JobAbortedError("job aborted while waiting for a lock")
                    self._cond.wait()
            finally:
                self._queue.remove(request)
                self._cond.notify_all()
            self._holders[origin] = kind

    def release(self, origin: int) -> None:
        with self._cond:
            if origin not in self._holders:
                raise UsageError(f"rank {origin} does not hold this lock")
            del self._holders[origin]
            self._cond.notify_all()

    def holders(self) -> dict[int, LockKind]:
        with self._cond:
            return dict(self._holders)

    def abort(self) -> None:
        with self._cond:
            self._aborted = True
            self._cond.notify_all()


class Window:
    """A window owned by one worker.

    Regions are attached in increasing displacement order, never overlap,
    and are never moved or shrunk.
    """

    def __init__(self, owner_rank: int, window_id: WindowId, backing: Backing | None = None):
        self.owner_rank = owner_rank
        self.id = window_id
        self.backing: Backing = backing or MemoryBacking()
        self.regions: list[Region] = []
        self.epoch = EpochLock()
        self._starts: list[int] = []
        self._next_displacement = 0
        self._atomic_lock = threading.Lock()
        self._region_lock = threading.Lock()

    def __repr__(self) -> str:
        return (
            f"Window(rank={self.owner_rank}, id={self.id.name}, "
            f"regions={[(r.displacement, r.length) for r in self.regions]})"
        )

    @property
    def extent(self) -> int:
        """End of the highest attached region."""
        return self.regions[-1].end if self.regions else 0

    def attach(self, size: int) -> Displacement:
        """Attach a zero-filled region and return its displacement."""
        if size < 0:
            raise UsageError(f"region size must not be negative: {size}")
        with self._region_lock:
            displacement = self._next_displacement
            try:
                buffer = self.backing.allocate(displacement, size)
            except MemoryError as e:
                raise ResourceError(
                    f"cannot allocate {size} bytes for window {self.id.name}"
                ) from e
            self._add_region(Region(displacement, size, buffer))
            return Displacement(displacement)

    def restore_region(self, displacement: int, data: bytes) -> None:
        """Re-attach a region at a known displacement with known contents."""
        with self._region_lock:
            if displacement < self._next_displacement:
                raise ProtocolError(
                    f"restored region at {displacement} overlaps existing regions"
                )
            buffer = self.backing.allocate(displacement, len(data))
            buffer[:] = data
            self._add_region(Region(displacement, len(data), buffer))

    def _add_region(self, region: Region) -> None:
        self.regions.append(region)
        self._starts.append(region.displacement)
        # Zero-length regions still consume address space so displacements stay unique
        self._next_displacement = align_up(region.displacement + max(region.length, 1))

    def _locate(self, offset: int, length: int) -> tuple[Region, int]:
        index = bisect.bisect_right(self._starts, offset) - 1
        if index >= 0:
            region = self.regions[index]
            if offset + length <= region.end:
                return region, offset - region.displacement
        raise ProtocolError(
            f"access [{offset}, {offset + length}) outside attached regions of "
            f"window {self.id.name} at rank {self.owner_rank}"
        )

    def read(self, offset: int, length: int) -> bytes:
        if length < 0:
            raise UsageError(f"negative read length: {length}")
        if length == 0:
            return b""
        region, start = self._locate(offset, length)
        return bytes(region.buffer[start:start + length])

    def write(self, offset: int, data: bytes | bytearray | memoryview) -> None:
        length = len(data)
        if length == 0:
            return
        region, start = self._locate(offset, length)
        region.buffer[start:start + length] = data
        self.backing.mark_dirty(offset, length)

    def _word_slot(self, offset: int) -> tuple[Region, int]:
        if offset % WORD_SIZE:
            raise UsageError(f"atomic offset {offset} is not 8-byte aligned")
        return self._locate(offset, WORD_SIZE)

    def atomic_fetch(self, offset: int) -> int:
        region, start = self._word_slot(offset)
        with self._atomic_lock:
            return int(WORD.unpack_from(region.buffer, start)[0])

    def atomic_replace(self, offset: int, word: int) -> None:
        _check_word(word)
        region, start = self._word_slot(offset)
        with self._atomic_lock:
            WORD.pack_into(region.buffer, start, word)
        self.backing.mark_dirty(offset, WORD_SIZE)

    def compare_and_swap(self, offset: int, expected: int, desired: int) -> int:
        _check_word(expected)
        _check_word(desired)
        region, start = self._word_slot(offset)
        with self._atomic_lock:
            prior = int(WORD.unpack_from(region.buffer, start)[0])
            if prior == expected:
                WORD.pack_into(region.buffer, start, desired)
        if prior == expected:
            self.backing.mark_dirty(offset, WORD_SIZE)
        return prior


def _check_word(word: int) -> None:
    if not 0 <= word <= WORD_MASK:
        raise UsageError(f"atomic word out of 64-bit range: {word}")


class Transport(ABC):
    """Abstract base class for the worker fabric."""

    @property
    @abstractmethod
    def num_workers(self) -> int:
        """Number of workers in the job."""

    @abstractmethod
    def register_window(self, window: Window) -> None:
        """Make a window remotely addressable."""

    @abstractmethod
    def window(self, rank: int, window_id: WindowId) -> Window:
        """Look up a registered window."""

    @abstractmethod
    def barrier(self) -> None:
        """Block until every worker has entered the barrier."""

    @property
    @abstractmethod
    def barrier_count(self) -> int:
        """Number of completed barrier episodes (audit counter)."""

    @abstractmethod
    def send(self, origin: int, dest: int, tag: str, payload: object) -> None:
        """Two-sided send (coupled engine only)."""

    @abstractmethod
    def recv(self, dest: int, source: int, tag: str) -> object:
        """Blocking two-sided receive (coupled engine only)."""

    @abstractmethod
    def abort(self, reason: str) -> None:
        """Abort the job, waking every blocked worker."""

    def context(self, rank: int) -> RmaContext:
        """Per-worker handle for one-sided operations."""
        if not 0 <= rank < self.num_workers:
            raise UsageError(f"rank {rank} outside [0, {self.num_workers})")
        return RmaContext(self, rank)


class LocalTransport(Transport):
    """In-process transport: one worker per thread, windows in shared memory."""

    def __init__(self, num_workers: int):
        if num_workers < 1:
            raise ConfigError(f"num_workers must be at least 1, got {num_workers}")
        self._num_workers = num_workers
        self._windows: dict[tuple[int, WindowId], Window] = {}
        self._registry_lock = threading.Lock()
        self._barrier = threading.Barrier(num_workers, action=self._count_barrier)
        self._barrier_count = 0
        self._mail_cond = threading.Condition()
        self._mailboxes: defaultdict[tuple[int, int, str], deque[object]] = defaultdict(deque)
        self._aborted: str | None = None

    @property
    def num_workers(self) -> int:
        return self._num_workers

    @property
    def barrier_count(self) -> int:
        return self._barrier_count

    @property
    def aborted(self) -> str | None:
        return self._aborted

    def _count_barrier(self) -> None:
        self._barrier_count += 1

    def register_window(self, window: Window) -> None:
        key = (window.owner_rank, window.id)
        with self._registry_lock:
            if key in self._windows:
                raise ConfigError(
                    f"window {window.id.name} already created on rank {window.owner_rank}"
                )
            self._windows[key] = window

    def window(self, rank: int, window_id: WindowId) -> Window:
        try:
            return self._windows[(rank, window_id)]
        except KeyError:
            raise UsageError(f"no window {window_id.name} on rank {rank}") from None

    def windows(self) -> list[Window]:
        with self._registry_lock:
            return list(self._windows.values())

    def barrier(self) -> None:
        try:
            self._barrier.wait()
        except threading.BrokenBarrierError:
            raise JobAbortedError(f"job aborted at barrier: {self._aborted}") from None

    def send(self, origin: int, dest: int, tag: str, payload: object) -> None:
        with self._mail_cond:
            self._mailboxes[(dest, origin, tag)].append(payload)
            self._mail_cond.notify_all()

    def recv(self, dest: int, source: int, tag: str) -> object:
        key = (dest, source, tag)
        with self._mail_cond:
            while not self._mailboxes[key]:
                if self._aborted is not None:
                    raise JobAbortedError(f"job aborted during receive: {self._aborted}")
                self._mail_cond.wait()
            return self._mailboxes[key].popleft()

    def abort(self, reason: str) -> None:
        if self._aborted is not None:
            return
        self._aborted = reason
        logger.error(f"Job aborted: {reason}")
        self._barrier.abort()
        for window in self.windows():
            window.epoch.abort()
        with self._mail_cond:
            self._mail_cond.notify_all()


@dataclass
class TransferStats:
    """Counts of underlying transfers issued by one context."""

    puts: int = 0
    gets: int = 0
    atomics: int = 0


@dataclass
class RmaContext:
    """One worker's view of the transport.

    Tracks the lock epochs this worker holds; put/get require an open
    epoch on the target window, atomics do not.
    """

    transport: Transport
    rank: int
    stats: TransferStats = field(default_factory=TransferStats)
    _epochs: dict[tuple[int, WindowId], LockKind] = field(default_factory=dict)

    @property
    def num_workers(self) -> int:
        return self.transport.num_workers

    def create_window(
        self, window_id: WindowId, initial_size: int, backing: Backing | None = None
    ) -> Window:
        """Create and register one of this worker's windows.

        A positive initial_size attaches a zero-filled region at displacement 0;
        zero leaves the window empty for later attachment.
        """
        window = Window(self.rank, window_id, backing)
        if initial_size > 0:
            window.attach(initial_size)
        self.transport.register_window(window)
        logger.debug(f"rank {self.rank}: created window {window_id.name} ({initial_size} bytes)")
        return window

    def attach_region(self, window_id: WindowId, size: int) -> Displacement:
        """Attach a region to one of this worker's own windows."""
        return self.transport.window(self.rank, window_id).attach(size)

    def _require_epoch(self, target: int, window_id: WindowId) -> None:
        if (target, window_id) not in self._epochs:
            raise UsageError(
                f"rank {self.rank} has no lock epoch on {window_id.name} at rank {target}"
            )

    def put(self, target: int, window_id: WindowId, offset: int, data: bytes) -> None:
        self._require_epoch(target, window_id)
        self.transport.window(target, window_id).write(offset, data)
        self.stats.puts += 1

    def get(self, target: int, window_id: WindowId, offset: int, length: int) -> bytes:
        self._require_epoch(target, window_id)
        data = self.transport.window(target, window_id).read(offset, length)
        if length:
            self.stats.gets += 1
        return data

    def get_chunked(
        self, target: int, window_id: WindowId, offset: int, length: int, chunk_limit: int
    ) -> bytes:
        """Read length bytes using transfers of at most chunk_limit bytes."""
        if chunk_limit <= 0:
            raise UsageError(f"chunk_limit must be positive, got {chunk_limit}")
        if length <= chunk_limit:
            return self.get(target, window_id, offset, length)
        out = bytearray(length)
        for start in range(0, length, chunk_limit):
            size = min(chunk_limit, length - start)
            out[start:start + size] = self.get(target, window_id, offset + start, size)
        return bytes(out)

    def flush(self, target: int, window_id: WindowId) -> None:
        """Complete outstanding operations of the epoch (immediate in-process)."""
        self._require_epoch(target, window_id)

    def atomic_fetch(self, target: int, window_id: WindowId, offset: int) -> int:
        self.stats.atomics += 1
        return self.transport.window(target, window_id).atomic_fetch(offset)

    def atomic_replace(self, target: int, window_id: WindowId, offset: int, word: int) -> None:
        self.stats.atomics += 1
        self.transport.window(target, window_id).atomic_replace(offset, word)

    def compare_and_swap(
        self, target: int, window_id: WindowId, offset: int, expected: int, desired: int
    ) -> int:
        self.stats.atomics += 1
        return self.transport.window(target, window_id).compare_and_swap(
            offset, expected, desired
        )

    def fetch_or(self, target: int, window_id: WindowId, offset: int, mask: int) -> int:
        """Atomically OR mask into the word; returns the prior value (CAS retry loop)."""
        prior = self.atomic_fetch(target, window_id, offset)
        while True:
            if prior | mask == prior:
                return prior
            seen = self.compare_and_swap(target, window_id, offset, prior, prior | mask)
            if seen == prior:
                return prior
            prior = seen

    def lock(self, target: int, window_id: WindowId, kind: LockKind) -> None:
        if (target, window_id) in self._epochs:
            raise UsageError(
                f"rank {self.rank} already holds a lock on {window_id.name} at rank {target}"
            )
        self.transport.window(target, window_id).epoch.acquire(self.rank, kind)
        self._epochs[(target, window_id)] = kind

    def unlock(self, target: int, window_id: WindowId) -> None:
        if (target, window_id) not in self._epochs:
            raise UsageError(
                f"rank {self.rank} unlocks {window_id.name} at rank {target} without a lock"
            )
        self.transport.window(target, window_id).epoch.release(self.rank)
        del self._epochs[(target, window_id)]

    def holds_lock(self, target: int, window_id: WindowId) -> bool:
        return (target, window_id) in self._epochs

    def barrier(self) -> None:
        self.transport.barrier()
