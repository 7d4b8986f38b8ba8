"""Configuration handling for mr1s.

This module provides:
- JobConfig dataclass with the job tunables (task size, chunk limit, buckets, ...)
- CheckpointConfig for storage-backed windows
- Loading from environment variables
- Loading from a shell-style config file
- Validation
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from pathlib import Path

from .dataset import SkewProfile, parse_skew

KB = 1024
MB = 1024 * 1024
GB = 1024 * 1024 * 1024

# Defaults used by the original evaluation (64 MiB tasks, 1 MiB per one-sided
# operation, 64 MiB of buckets per worker).
DEFAULT_TASK_SIZE = 64 * MB
DEFAULT_CHUNK_SIZE = 1 * MB
DEFAULT_BUCKET_SIZE = 64 * MB
DEFAULT_WIN_SIZE = 4 * MB
DEFAULT_BOUNDARY_OVERLAP = 64 * KB
DEFAULT_LOCAL_REDUCE_LIMIT = 1 << 16


class ConfigError(Exception):
    """Configuration error."""


def parse_size(size_str: str | int) -> int:
    """Parse a size string like '64M' or '1MiB' to bytes.

    Args:
        size_str: Size string (e.g., '64MiB', '500M', '1024K', '1000000')

    Returns:
        Size in bytes

    Raises:
        ConfigError: If size string is invalid
    """
    if isinstance(size_str, int):
        return size_str

    size_str = str(size_str).strip().upper()

    if size_str.endswith("%"):
        raise ConfigError(f"Percentage sizes not supported: {size_str}")

    match = re.match(r"^(\d+(?:\.\d+)?)\s*([KMGT]?I?B?)?$", size_str)
    if not match:
        raise ConfigError(f"Invalid size string: {size_str}")

    value = float(match.group(1))
    suffix = (match.group(2) or "").rstrip("B").rstrip("I")

    multipliers = {
        "": 1,
        "K": KB,
        "M": MB,
        "G": GB,
        "T": GB * 1024,
    }

    if suffix not in multipliers:
        raise ConfigError(f"Invalid size suffix: {suffix}")

    return int(value * multipliers[suffix])


def _parse_bool(value: str) -> bool:
    return value.strip().lower() in ("1", "true", "yes", "on")


@dataclass
class CheckpointConfig:
    """Storage-backed window settings."""

    directory: Path
    recover: bool = False  # Load existing images instead of starting cold
    async_flush: bool = True  # Persist in the background, overlapping the next task


@dataclass
class JobConfig:
    """All job tunables plus harness settings."""

    filename: Path = Path("input.txt")
    win_size: int = DEFAULT_WIN_SIZE  # Initial Combine window bytes
    chunk_size: int = DEFAULT_CHUNK_SIZE  # Max bytes per one-sided transfer
    task_size: int = DEFAULT_TASK_SIZE
    bucket_size: int = DEFAULT_BUCKET_SIZE  # Initial Key-Value window bytes per worker
    num_workers: int = 1
    redundant_lock_opt: bool = False
    checkpoint: CheckpointConfig | None = None
    skew_profile: SkewProfile = field(default_factory=SkewProfile)

    # Harness settings
    boundary_overlap: int = DEFAULT_BOUNDARY_OVERLAP
    local_reduce_limit: int = DEFAULT_LOCAL_REDUCE_LIMIT  # Distinct keys before a mid-task spill
    read_delay_s: float = 0.0  # Injected latency per input read
    task_delay_s: float = 0.0  # Simulated compute cost per Map pass

    def validate(self) -> list[str]:
        """Validate configuration.

        Returns:
            List of problems (empty if valid)
        """
        problems: list[str] = []

        if self.task_size <= 0:
            problems.append(f"task_size must be positive, got {self.task_size}")
        if self.chunk_size <= 0:
            problems.append(f"chunk_size must be positive, got {self.chunk_size}")
        if self.bucket_size <= 8:
            problems.append(f"bucket_size must exceed 8 bytes, got {self.bucket_size}")
        if self.win_size < 0:
            problems.append(f"win_size must not be negative, got {self.win_size}")
        if self.num_workers < 1:
            problems.append(f"num_workers must be at least 1, got {self.num_workers}")
        if self.boundary_overlap < 1:
            problems.append("boundary_overlap must be at least 1 byte")
        if self.local_reduce_limit < 1:
            problems.append("local_reduce_limit must be at least 1")
        if self.read_delay_s < 0 or self.task_delay_s < 0:
            problems.append("injected delays must not be negative")

        return problems

    def require_valid(self) -> None:
        """Raise ConfigError if validate() reports any problem."""
        problems = self.validate()
        if problems:
            raise ConfigError("; ".join(problems))


def load_from_env() -> JobConfig:
    """Load configuration from environment variables.

    Reads environment variables:
    - MR1S_INPUT (input file)
    - MR1S_WIN_SIZE, MR1S_CHUNK_SIZE, MR1S_TASK_SIZE, MR1S_BUCKET_SIZE (sizes)
    - MR1S_WORKERS, MR1S_REDUNDANT_LOCKS
    - MR1S_CHECKPOINT_DIR, MR1S_RECOVER
    - MR1S_SKEW (e.g. "worker0x4")

    Returns:
        JobConfig instance
    """
    config = JobConfig()

    if path := os.environ.get("MR1S_INPUT"):
        config.filename = Path(path)

    if value := os.environ.get("MR1S_WIN_SIZE"):
        config.win_size = parse_size(value)
    if value := os.environ.get("MR1S_CHUNK_SIZE"):
        config.chunk_size = parse_size(value)
    if value := os.environ.get("MR1S_TASK_SIZE"):
        config.task_size = parse_size(value)
    if value := os.environ.get("MR1S_BUCKET_SIZE"):
        config.bucket_size = parse_size(value)

    if value := os.environ.get("MR1S_WORKERS"):
        try:
            config.num_workers = int(value)
        except ValueError as e:
            raise ConfigError(f"Invalid MR1S_WORKERS: {value}") from e

    config.redundant_lock_opt = _parse_bool(os.environ.get("MR1S_REDUNDANT_LOCKS", "false"))

    if path := os.environ.get("MR1S_CHECKPOINT_DIR"):
        config.checkpoint = CheckpointConfig(
            directory=Path(path),
            recover=_parse_bool(os.environ.get("MR1S_RECOVER", "false")),
        )

    if value := os.environ.get("MR1S_SKEW"):
        try:
            config.skew_profile = parse_skew(value)
        except ValueError as e:
            raise ConfigError(str(e)) from e

    return config


def load_from_file(path: Path) -> JobConfig:
    """Load configuration from a shell-style config file.

    Parses files that use export VAR=value or VAR=value syntax, with the
    same variable names as load_from_env().

    Args:
        path: Path to config file

    Returns:
        JobConfig instance
    """
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")

    env_vars: dict[str, str] = {}

    with open(path) as f:
        for line in f:
            line = line.strip()

            if not line or line.startswith("#"):
                continue

            if line.startswith("export "):
                line = line[7:]

            if "=" in line:
                key, _, value = line.partition("=")
                key = key.strip()
                value = value.strip()

                if (value.startswith('"') and value.endswith('"')) or \
                   (value.startswith("'") and value.endswith("'")):
                    value = value[1:-1]

                env_vars[key] = value

    # Temporarily set environment variables and load
    old_env = dict(os.environ)
    try:
        os.environ.update(env_vars)
        return load_from_env()
    finally:
        os.environ.clear()
        os.environ.update(old_env)
