"""Use-case plugin surface and the Word-Count use case.

Engines only see UseCase: map over a task's bytes, reduce two values of the
same key, and encode/decode values to record bytes.
"""

from __future__ import annotations

import logging
import re
import struct
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable, Generic, TypeVar

logger = logging.getLogger(__name__)

V = TypeVar("V")

COUNT = struct.Struct("<Q")
COUNT_MAX = (1 << 64) - 1


class UseCaseError(Exception):
    """Base exception for use-case failures."""


class MapError(UseCaseError):
    """Map could not process its task."""


class ReduceOverflowError(UseCaseError):
    """A reduced value left its domain."""


@dataclass(frozen=True)
class TaskInput:
    """Bytes handed to map for one task.

    data[start:stop] is the task's nominal range. When the task is not the
    first, data[start - 1] is the byte preceding it; bytes past stop are the
    boundary overlap used to finish the last token.
    """

    data: bytes
    start: int
    stop: int
    first: bool
    at_eof: bool

    @classmethod
    def whole(cls, data: bytes) -> TaskInput:
        """A single task covering all of data."""
        return cls(data=data, start=0, stop=len(data), first=True, at_eof=True)


Emit = Callable[[bytes, V], None]


class UseCase(ABC, Generic[V]):
    """Abstract base class for MapReduce use cases.

    reduce must be associative and commutative; implementations must be
    stateless so workers can call them concurrently.
    """

    name: str = "usecase"

    @abstractmethod
    def map(self, task: TaskInput, emit: Emit[V]) -> None:
        """Emit key-value pairs for one task."""

    @abstractmethod
    def reduce(self, key: bytes, a: V, b: V) -> V:
        """Combine two values of the same key."""

    def reduce_local(self, key: bytes, a: V, b: V) -> V:
        """Combine two values on the mapping worker (defaults to reduce)."""
        return self.reduce(key, a, b)

    @abstractmethod
    def encode_value(self, value: V) -> bytes:
        """Value to record bytes."""

    @abstractmethod
    def decode_value(self, data: bytes) -> V:
        """Record bytes to value."""

    def format_pair(self, key: bytes, value: V) -> str:
        return f"{key.decode(errors='replace')}\t{value}"


_TOKEN = re.compile(rb"[A-Za-z0-9]+")


def _is_alnum(byte: int) -> bool:
    return (48 <= byte <= 57) or (65 <= byte <= 90) or (97 <= byte <= 122)


class WordCount(UseCase[int]):
    """Counts lower-cased runs of ASCII alphanumerics.

    A task skips a leading token that started in the previous task and
    finishes its last token past its nominal end, so every token is counted
    by exactly one task whatever the split points.
    """

    name = "wordcount"

    def map(self, task: TaskInput, emit: Emit[int]) -> None:
        data = task.data
        skip_leading = (
            not task.first and task.start > 0 and _is_alnum(data[task.start - 1])
        )
        for match in _TOKEN.finditer(data, task.start):
            begin, end = match.span()
            if begin >= task.stop:
                break
            if skip_leading and begin == task.start:
                continue
            if end == len(data) and not task.at_eof:
                raise MapError(
                    f"token at task byte {begin - task.start} runs past the boundary overlap"
                )
            emit(match.group().lower(), 1)

    def reduce(self, key: bytes, a: int, b: int) -> int:
        total = a + b
        if total > COUNT_MAX:
            raise ReduceOverflowError(f"count for {key!r} overflows 64 bits")
        return total

    def encode_value(self, value: int) -> bytes:
        return COUNT.pack(value)

    def decode_value(self, data: bytes) -> int:
        return int(COUNT.unpack(data)[0])


USE_CASES: dict[str, Callable[[], UseCase[int]]] = {
    WordCount.name: WordCount,
}
