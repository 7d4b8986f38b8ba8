"""Storage-backed windows, synchronization points and restart.

This module provides:
- StorageBacking: window backing that records modified byte ranges
- StorageWindow / open_storage_window / win_sync / win_sync_async: a window
  mirrored to an image file
- Journal: redo journal that makes a sync atomic across image files
- CheckpointSet: all storage windows of one worker plus its completed-task
  bitmap, synced after every Map task and after Reduce
- recover_job: reads a checkpoint directory back into a ResumePoint

Design principles:
- The committed journal is the single source of truth for a sync in flight:
  it is renamed into place only once complete, replayed on open, and
  removed after it has been applied
- Image files are only modified by journal replay, so a crash before a sync
  commits leaves the previous synced state intact
- Snapshots of dirty ranges are taken synchronously; writing them to storage
  may run on a background thread while the next task proceeds

Image layout: a 64-byte header, the window address space (displacement d
lives at file offset 64 + d), then a trailer holding the region table and
the completed-task bitmap.
"""

from __future__ import annotations

import logging
import os
import struct
import threading
import zlib
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from pathlib import Path

from .config import CheckpointConfig, JobConfig
from .rma import Backing, RmaContext, Window, WindowId

logger = logging.getLogger(__name__)

IMAGE_MAGIC = b"MR1SWIN\0"
IMAGE_VERSION = 1
IMAGE_HEADER = struct.Struct("<8sIIIIQQIIQI4x")
REGION_ENTRY = struct.Struct("<QQ")

JOURNAL_MAGIC = b"MR1SJNL\0"
JOURNAL_HEADER = struct.Struct("<8sII")  # magic, entry count, crc32 of body
JOURNAL_ENTRY = struct.Struct("<BHQQ")  # kind, name length, a, b

_RESIZE = 1
_WRITE = 2


class CheckpointError(Exception):
    """Base exception for checkpoint errors."""


class CorruptImageError(CheckpointError):
    """Image file fails framing validation."""


class CheckpointPhase(IntEnum):
    """Progress recorded in image headers."""

    MAP = 1
    REDUCED = 2
    DONE = 3


class StorageBacking(Backing):
    """Backing that records dirty ranges between syncs."""

    def __init__(self) -> None:
        self._dirty: list[tuple[int, int]] = []
        self._lock = threading.Lock()

    def allocate(self, displacement: int, size: int) -> bytearray:
        return bytearray(size)

    def mark_dirty(self, displacement: int, length: int) -> None:
        with self._lock:
            self._dirty.append((displacement, length))

    def take_dirty(self) -> list[tuple[int, int]]:
        """Return merged dirty ranges and start a new interval."""
        with self._lock:
            dirty, self._dirty = self._dirty, []
        merged: list[tuple[int, int]] = []
        for start, length in sorted(dirty):
            end = start + length
            if merged and start <= merged[-1][1]:
                merged[-1] = (merged[-1][0], max(merged[-1][1], end))
            else:
                merged.append((start, end))
        return [(start, end - start) for start, end in merged]


@dataclass
class Resize:
    """Truncate the file to old_size, then extend it (zero-filled) to new_size."""

    name: str
    old_size: int
    new_size: int


@dataclass
class Write:
    name: str
    offset: int
    data: bytes


class Journal:
    """Redo journal committed by atomic rename.

    Entries name files relative to the journal's directory.
    """

    def __init__(self, path: Path):
        self.path = path
        self.tmp_path = path.with_name(path.name + ".tmp")

    def commit(self, entries: list[Resize | Write]) -> None:
        """Make entries durable, apply them to the image files, then drop the journal."""
        body = bytearray()
        for entry in entries:
            name = entry.name.encode()
            if isinstance(entry, Resize):
                body += JOURNAL_ENTRY.pack(_RESIZE, len(name), entry.old_size, entry.new_size)
                body += name
            else:
                body += JOURNAL_ENTRY.pack(_WRITE, len(name), entry.offset, len(entry.data))
                body += name
                body += entry.data
        header = JOURNAL_HEADER.pack(JOURNAL_MAGIC, len(entries), zlib.crc32(body))

        with open(self.tmp_path, "wb") as f:
            f.write(header)
            f.write(body)
            f.flush()
            os.fsync(f.fileno())
        os.replace(self.tmp_path, self.path)
        _fsync_dir(self.path.parent)

        self._apply(entries)
        self.path.unlink()

    def recover(self) -> bool:
        """Replay a committed journal left by a crash.

        Returns:
            True if a journal was replayed
        """
        if self.tmp_path.exists():
            logger.warning(f"Discarding uncommitted journal {self.tmp_path}")
            self.tmp_path.unlink()
        if not self.path.exists():
            return False
        entries = self._parse(self.path.read_bytes())
        logger.warning(f"Replaying journal {self.path} ({len(entries)} entries)")
        self._apply(entries)
        self.path.unlink()
        return True

    def _parse(self, raw: bytes) -> list[Resize | Write]:
        if len(raw) < JOURNAL_HEADER.size:
            raise CheckpointError(f"truncated journal {self.path}")
        magic, count, crc = JOURNAL_HEADER.unpack_from(raw)
        body = raw[JOURNAL_HEADER.size:]
        if magic != JOURNAL_MAGIC or zlib.crc32(body) != crc:
            raise CheckpointError(f"corrupt journal {self.path}")
        entries: list[Resize | Write] = []
        at = 0
        for _ in range(count):
            kind, name_len, a, b = JOURNAL_ENTRY.unpack_from(body, at)
            at += JOURNAL_ENTRY.size
            name = body[at:at + name_len].decode()
            at += name_len
            if kind == _RESIZE:
                entries.append(Resize(name, a, b))
            else:
                entries.append(Write(name, a, bytes(body[at:at + b])))
                at += b
        return entries

    def _apply(self, entries: list[Resize | Write]) -> None:
        fds: dict[str, int] = {}
        try:
            for entry in entries:
                fd = fds.get(entry.name)
                if fd is None:
                    fd = os.open(self.path.parent / entry.name, os.O_RDWR | os.O_CREAT, 0o644)
                    fds[entry.name] = fd
                if isinstance(entry, Resize):
                    os.ftruncate(fd, entry.old_size)
                    os.ftruncate(fd, entry.new_size)
                else:
                    os.pwrite(fd, entry.data, entry.offset)
            for fd in fds.values():
                os.fsync(fd)
        finally:
            for fd in fds.values():
                os.close(fd)


def _fsync_dir(path: Path) -> None:
    fd = os.open(path, os.O_RDONLY)
    try:
        os.fsync(fd)
    finally:
        os.close(fd)


@dataclass
class WindowImage:
    """Parsed contents of an image file."""

    window_id: WindowId
    rank: int
    num_workers: int
    task_size: int
    phase: int
    bitmap_bits: int
    bitmap: bytes
    extent: int
    regions: list[tuple[int, bytes]] = field(default_factory=list)

    def read(self, offset: int, length: int) -> bytes:
        if length == 0:
            return b""
        for displacement, data in self.regions:
            if displacement <= offset and offset + length <= displacement + len(data):
                start = offset - displacement
                return data[start:start + length]
        raise CorruptImageError(f"image has no region covering [{offset}, {offset + length})")


def read_image(path: Path) -> WindowImage:
    """Parse and validate an image file.

    Raises:
        CorruptImageError: If the file fails framing validation
    """
    raw = path.read_bytes()
    if len(raw) < IMAGE_HEADER.size:
        raise CorruptImageError(f"{path}: truncated header")
    (
        magic, version, window_id, rank, num_workers, extent,
        trailer_offset, bitmap_bits, phase, task_size, region_count,
    ) = IMAGE_HEADER.unpack_from(raw)
    if magic != IMAGE_MAGIC:
        raise CorruptImageError(f"{path}: bad magic {magic!r}")
    if version != IMAGE_VERSION:
        raise CorruptImageError(f"{path}: unsupported version {version}")
    bitmap_len = (bitmap_bits + 7) // 8
    expected = trailer_offset + region_count * REGION_ENTRY.size + bitmap_len
    if trailer_offset != IMAGE_HEADER.size + extent or len(raw) != expected:
        raise CorruptImageError(f"{path}: size {len(raw)} does not match header ({expected})")
    try:
        wid = WindowId(window_id)
    except ValueError:
        raise CorruptImageError(f"{path}: unknown window id {window_id}") from None

    regions: list[tuple[int, bytes]] = []
    at = trailer_offset
    for _ in range(region_count):
        displacement, length = REGION_ENTRY.unpack_from(raw, at)
        at += REGION_ENTRY.size
        if displacement + length > extent:
            raise CorruptImageError(f"{path}: region beyond address space")
        start = IMAGE_HEADER.size + displacement
        regions.append((displacement, raw[start:start + length]))

    return WindowImage(
        window_id=wid,
        rank=rank,
        num_workers=num_workers,
        task_size=task_size,
        phase=phase,
        bitmap_bits=bitmap_bits,
        bitmap=raw[at:at + bitmap_len],
        extent=extent,
        regions=regions,
    )


class StorageWindow:
    """A window mirrored to an image file."""

    def __init__(
        self,
        window: Window,
        path: Path,
        backing: StorageBacking,
        persisted_extent: int = 0,
        num_workers: int = 0,
        task_size: int = 0,
    ):
        self.window = window
        self.path = path
        self.backing = backing
        self.num_workers = num_workers
        self.task_size = task_size
        self._persisted_extent = persisted_extent

    def snapshot(
        self, phase: int = 0, bitmap: bytes = b"", bitmap_bits: int = 0
    ) -> list[Resize | Write]:
        """Journal entries that bring the image up to the window's current state."""
        name = self.path.name
        regions = [(r.displacement, r.length) for r in self.window.regions]
        extent = self.window.extent
        entries: list[Resize | Write] = [
            Resize(name, IMAGE_HEADER.size + self._persisted_extent, IMAGE_HEADER.size + extent)
        ]
        for offset, length in self.backing.take_dirty():
            for data_offset, data in self._copy(offset, length):
                entries.append(Write(name, IMAGE_HEADER.size + data_offset, data))

        trailer = b"".join(REGION_ENTRY.pack(d, n) for d, n in regions) + bitmap
        header = IMAGE_HEADER.pack(
            IMAGE_MAGIC, IMAGE_VERSION, int(self.window.id), self.window.owner_rank,
            self.num_workers, extent, IMAGE_HEADER.size + extent, bitmap_bits, phase,
            self.task_size, len(regions),
        )
        entries.append(Write(name, IMAGE_HEADER.size + extent, trailer))
        entries.append(Write(name, 0, header))
        self._persisted_extent = extent
        return entries

    def _copy(self, offset: int, length: int) -> list[tuple[int, bytes]]:
        end = offset + length
        pieces: list[tuple[int, bytes]] = []
        for region in self.window.regions:
            start = max(offset, region.displacement)
            stop = min(end, region.end)
            if start < stop:
                pieces.append((start, self.window.read(start, stop - start)))
        return pieces


def open_storage_window(
    ctx: RmaContext,
    window_id: WindowId,
    size: int,
    path: Path,
    recover: bool = False,
    num_workers: int = 0,
    task_size: int = 0,
) -> StorageWindow:
    """Create a window mirrored to path.

    With recover set and a synced image present, the window is rebuilt from
    the last synced state. An image that was never synced is empty and
    yields a zero-filled window of size bytes, as does opening without
    recover, which also recreates the file.
    """
    Journal(_journal_path_for(path)).recover()
    backing = StorageBacking()
    if recover and path.exists() and path.stat().st_size > 0:
        image = read_image(path)
        window = ctx.create_window(window_id, 0, backing)
        for displacement, data in image.regions:
            window.restore_region(displacement, data)
        return StorageWindow(window, path, backing, image.extent, num_workers, task_size)

    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"")
    window = ctx.create_window(window_id, size, backing)
    return StorageWindow(window, path, backing, 0, num_workers, task_size)


def _journal_path_for(path: Path) -> Path:
    return path.with_name(path.name + ".journal")


def win_sync(sw: StorageWindow) -> None:
    """Make every byte modified since the previous sync durable."""
    Journal(_journal_path_for(sw.path)).commit(sw.snapshot())


def win_sync_async(sw: StorageWindow, executor: ThreadPoolExecutor) -> Future[None]:
    """Snapshot now and persist on executor.

    The window may be modified as soon as this returns. A single-thread
    executor keeps commits of one window in order.
    """
    return executor.submit(Journal(_journal_path_for(sw.path)).commit, sw.snapshot())


def image_path(directory: Path, rank: int, window_id: WindowId) -> Path:
    return directory / f"rank{rank}.{window_id.name.lower()}.img"


def journal_path(directory: Path, rank: int) -> Path:
    return directory / f"rank{rank}.journal"


class CheckpointSet:
    """Storage windows of one worker, synced together through one journal."""

    def __init__(
        self,
        config: CheckpointConfig,
        rank: int,
        num_workers: int,
        task_size: int,
        num_tasks: int,
        bitmap: bytes | None = None,
    ):
        self.config = config
        self.rank = rank
        self.num_workers = num_workers
        self.task_size = task_size
        self.num_tasks = num_tasks
        self.bitmap = bytearray(bitmap) if bitmap else bytearray((num_tasks + 7) // 8)
        self.windows: dict[WindowId, StorageWindow] = {}
        self.journal = Journal(journal_path(config.directory, rank))
        self.sync_count = 0
        self._executor: ThreadPoolExecutor | None = None
        self._pending: Future[None] | None = None
        if config.async_flush:
            self._executor = ThreadPoolExecutor(max_workers=1, thread_name_prefix=f"ckpt-{rank}")
        config.directory.mkdir(parents=True, exist_ok=True)
        self.journal.recover()

    def open_window(
        self, ctx: RmaContext, window_id: WindowId, size: int, image: WindowImage | None = None
    ) -> Window:
        """Create a storage-backed window, restored from image when given."""
        path = image_path(self.config.directory, self.rank, window_id)
        backing = StorageBacking()
        if image is not None:
            window = ctx.create_window(window_id, 0, backing)
            for displacement, data in image.regions:
                window.restore_region(displacement, data)
            extent = image.extent
        else:
            path.write_bytes(b"")
            window = ctx.create_window(window_id, size, backing)
            extent = 0
        self.windows[window_id] = StorageWindow(
            window, path, backing, extent, self.num_workers, self.task_size
        )
        return window

    def mark_task_complete(self, index: int) -> None:
        self.bitmap[index // 8] |= 1 << (index % 8)

    def is_task_complete(self, index: int) -> bool:
        return bool(self.bitmap[index // 8] & (1 << (index % 8)))

    def sync(self, phase: CheckpointPhase) -> None:
        """Snapshot every window now; persist in the background if configured."""
        self.wait()
        entries: list[Resize | Write] = []
        for sw in self.windows.values():
            entries += sw.snapshot(int(phase), bytes(self.bitmap), self.num_tasks)
        self.sync_count += 1
        logger.debug(
            f"rank {self.rank}: sync {self.sync_count} ({phase.name}, {len(entries)} entries)"
        )
        if self._executor is not None:
            self._pending = self._executor.submit(self.journal.commit, entries)
        else:
            self.journal.commit(entries)

    def wait(self) -> None:
        """Block until the previous sync is durable; storage errors surface here."""
        if self._pending is not None:
            pending, self._pending = self._pending, None
            pending.result()

    def close(self) -> None:
        try:
            self.wait()
        finally:
            if self._executor is not None:
                self._executor.shutdown(wait=True)


class ResumeMode(Enum):
    MAP = "map"  # Resume Map from the task bitmaps, redo every Reduce
    COMBINE = "combine"  # Every worker reduced; merge persisted level-0 runs
    DONE = "done"  # Result already computed


@dataclass
class ResumePoint:
    """Where a restarted job picks up."""

    mode: ResumeMode
    phases: dict[int, CheckpointPhase]
    images: dict[int, dict[WindowId, WindowImage]]

    def bitmap(self, rank: int) -> bytes:
        return self.images[rank][WindowId.KEYVALUE].bitmap

    def completed_tasks(self, rank: int) -> set[int]:
        bitmap = self.bitmap(rank)
        return {i for i in range(len(bitmap) * 8) if bitmap[i // 8] & (1 << (i % 8))}


def recover_job(cfg: JobConfig, file_len: int) -> ResumePoint | None:
    """Load the checkpoint for cfg.

    Returns:
        ResumePoint, or None for a cold start (missing or corrupt images)

    Raises:
        CheckpointError: If the images were written for another configuration
    """
    if cfg.checkpoint is None:
        raise CheckpointError("checkpointing is not configured")
    directory = cfg.checkpoint.directory
    num_tasks = -(-file_len // cfg.task_size)

    images: dict[int, dict[WindowId, WindowImage]] = {}
    for rank in range(cfg.num_workers):
        try:
            Journal(journal_path(directory, rank)).recover()
        except CheckpointError as e:
            logger.warning(f"Cold start: {e}")
            return None
        images[rank] = {}
        for window_id in WindowId:
            path = image_path(directory, rank, window_id)
            if not path.exists():
                logger.warning(f"Cold start: checkpoint image {path} is missing")
                return None
            if path.stat().st_size == 0:
                logger.warning(f"Cold start: checkpoint image {path} was never synced")
                return None
            try:
                image = read_image(path)
                CheckpointPhase(image.phase)
            except (CorruptImageError, ValueError) as e:
                logger.warning(f"Cold start: {path}: {e}")
                return None
            if image.num_workers != cfg.num_workers:
                raise CheckpointError(
                    f"checkpoint was written by {image.num_workers} workers, "
                    f"job has {cfg.num_workers}"
                )
            if image.task_size != cfg.task_size or image.bitmap_bits != num_tasks:
                raise CheckpointError(
                    f"checkpoint was written for task size {image.task_size} over "
                    f"{image.bitmap_bits} tasks, job has {cfg.task_size} over {num_tasks}"
                )
            images[rank][window_id] = image

    phases = {
        rank: CheckpointPhase(images[rank][WindowId.KEYVALUE].phase)
        for rank in images
    }
    if phases[0] == CheckpointPhase.DONE:
        mode = ResumeMode.DONE
    elif all(p >= CheckpointPhase.REDUCED for p in phases.values()):
        mode = ResumeMode.COMBINE
    else:
        mode = ResumeMode.MAP
    logger.warning(f"Resuming from checkpoint in {directory} ({mode.value})")
    return ResumePoint(mode, phases, images)
