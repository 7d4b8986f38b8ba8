"""Combine tree: schedule, two-way merge and run checks.

Level 0 is each worker's reduced run. At level l >= 1 rank r merges iff
r % 2**l == 0, taking the run of partner r + 2**(l-1) when that partner
exists. Every other rank publishes its run at the level where it stops
merging and is done; rank 0 ends with the result.
"""

from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass
from enum import Enum
from itertools import groupby
from operator import itemgetter
from typing import TypeVar

from .kvcodec import encode_records, iterate_records
from .usecase import UseCase

logger = logging.getLogger(__name__)

V = TypeVar("V")

# A key-sorted, duplicate-free run of (key, value) pairs
CombineRun = list[tuple[bytes, V]]


class RunOrderError(Exception):
    """A run is not strictly ascending by key."""


class StepKind(Enum):
    MERGE = "merge"
    PASS = "pass"  # Partner rank does not exist
    PUBLISH = "publish"  # Hand the run to the parent and stop


@dataclass(frozen=True)
class CombineStep:
    level: int
    kind: StepKind
    partner: int | None = None


def combine_levels(num_workers: int) -> int:
    """ceil(log2(num_workers)) + 1."""
    if num_workers < 1:
        raise ValueError(f"num_workers must be at least 1, got {num_workers}")
    return (num_workers - 1).bit_length() + 1


def combine_schedule(rank: int, num_workers: int) -> list[CombineStep]:
    """Steps rank takes from level 1 upwards."""
    steps: list[CombineStep] = []
    for level in range(1, combine_levels(num_workers)):
        if rank % (1 << level):
            steps.append(CombineStep(level, StepKind.PUBLISH, rank - (1 << (level - 1))))
            return steps
        partner = rank + (1 << (level - 1))
        if partner >= num_workers:
            steps.append(CombineStep(level, StepKind.PASS))
        else:
            steps.append(CombineStep(level, StepKind.MERGE, partner))
    return steps


def merge_runs(a: CombineRun[V], b: CombineRun[V], uc: UseCase[V]) -> CombineRun[V]:
    """Two-way merge; equal keys are combined with uc.reduce."""
    merged: CombineRun[V] = []
    for key, group in groupby(heapq.merge(a, b, key=itemgetter(0)), key=itemgetter(0)):
        values = [value for _, value in group]
        acc = values[0]
        for value in values[1:]:
            acc = uc.reduce(key, acc, value)
        merged.append((key, acc))
    return merged


def check_run(pairs: CombineRun[V], level: int = 0) -> None:
    """Raise RunOrderError unless keys are strictly ascending."""
    for (prev, _), (key, _) in zip(pairs, pairs[1:]):
        if not prev < key:
            raise RunOrderError(f"level {level} run out of order at {prev!r} >= {key!r}")


def run_from_table(table: dict[bytes, V]) -> CombineRun[V]:
    return sorted(table.items(), key=itemgetter(0))


def encode_run(pairs: CombineRun[V], uc: UseCase[V]) -> bytes:
    return encode_records((key, uc.encode_value(value)) for key, value in pairs)


def decode_run(data: bytes, uc: UseCase[V]) -> CombineRun[V]:
    return [(r.key, uc.decode_value(r.value)) for r in iterate_records(data)]
