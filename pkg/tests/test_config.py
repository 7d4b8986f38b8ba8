"""Tests for configuration handling."""

import os
from pathlib import Path
import tempfile

import pytest

from mr1s.config import (
    DEFAULT_BUCKET_SIZE,
    DEFAULT_CHUNK_SIZE,
    DEFAULT_TASK_SIZE,
    CheckpointConfig,
    ConfigError,
    JobConfig,
    parse_size,
    load_from_env,
    load_from_file,
    GB,
    KB,
    MB,
)

ENV_VARS = [
    "MR1S_INPUT", "MR1S_WIN_SIZE", "MR1S_CHUNK_SIZE", "MR1S_TASK_SIZE", "MR1S_BUCKET_SIZE",
    "MR1S_WORKERS", "MR1S_REDUNDANT_LOCKS", "MR1S_CHECKPOINT_DIR", "MR1S_RECOVER", "MR1S_SKEW",
]


@pytest.fixture
def clean_env(monkeypatch):
    """Remove every MR1S_* variable for the test."""
    for name in ENV_VARS:
        monkeypatch.delenv(name, raising=False)


class TestParseSize:
    """Tests for parse_size function."""

    def test_parse_bytes(self):
        """Test parsing plain bytes."""
        assert parse_size("1000") == 1000
        assert parse_size("0") == 0

    def test_parse_binary_suffixes(self):
        """Test parsing K/M/G with and without the iB suffix."""
        assert parse_size("64K") == 64 * KB
        assert parse_size("64KiB") == 64 * KB
        assert parse_size("64MiB") == 64 * MB
        assert parse_size("1m") == MB
        assert parse_size("1GB") == GB

    def test_parse_with_spaces(self):
        """Test parsing with spaces."""
        assert parse_size("  4M  ") == 4 * MB
        assert parse_size("1 G") == GB

    def test_parse_decimal(self):
        """Test parsing decimal values."""
        assert parse_size("1.5M") == int(1.5 * MB)

    def test_parse_int_passthrough(self):
        """Test that int values pass through."""
        assert parse_size(1000) == 1000

    def test_parse_invalid(self):
        """Test parsing invalid values raises error."""
        with pytest.raises(ConfigError):
            parse_size("invalid")
        with pytest.raises(ConfigError):
            parse_size("10%")


class TestJobConfig:
    """Tests for JobConfig."""

    def test_defaults(self):
        """Test defaults match the reference evaluation sizes."""
        cfg = JobConfig()

        assert cfg.task_size == DEFAULT_TASK_SIZE == 64 * MB
        assert cfg.chunk_size == DEFAULT_CHUNK_SIZE == 1 * MB
        assert cfg.bucket_size == DEFAULT_BUCKET_SIZE == 64 * MB
        assert cfg.num_workers == 1
        assert cfg.checkpoint is None
        assert cfg.skew_profile.balanced
        assert cfg.validate() == []

    def test_validate_reports_every_problem(self):
        """Test validate collects all problems instead of stopping at the first."""
        cfg = JobConfig(task_size=0, chunk_size=-1, num_workers=0)

        problems = cfg.validate()

        assert any("task_size" in p for p in problems)
        assert any("chunk_size" in p for p in problems)
        assert any("num_workers" in p for p in problems)

    def test_validate_bucket_size(self):
        """Test a bucket must hold more than its control word."""
        assert JobConfig(bucket_size=8).validate()
        assert not JobConfig(bucket_size=4 * KB).validate()

    def test_require_valid_raises(self):
        """Test require_valid raises ConfigError with all problems."""
        with pytest.raises(ConfigError, match="task_size"):
            JobConfig(task_size=0).require_valid()

    def test_negative_delays_rejected(self):
        """Test injected delays must not be negative."""
        assert JobConfig(task_delay_s=-1.0).validate()


class TestLoadFromEnv:
    """Tests for load_from_env function."""

    def test_load_default_env(self, clean_env):
        """Test loading with no environment variables set."""
        config = load_from_env()

        assert config == JobConfig()

    def test_load_sizes_and_workers(self, clean_env, monkeypatch):
        """Test size and worker variables."""
        monkeypatch.setenv("MR1S_INPUT", "/data/corpus.txt")
        monkeypatch.setenv("MR1S_TASK_SIZE", "1M")
        monkeypatch.setenv("MR1S_CHUNK_SIZE", "64K")
        monkeypatch.setenv("MR1S_BUCKET_SIZE", "8M")
        monkeypatch.setenv("MR1S_WORKERS", "8")
        monkeypatch.setenv("MR1S_REDUNDANT_LOCKS", "yes")

        config = load_from_env()

        assert config.filename == Path("/data/corpus.txt")
        assert config.task_size == MB
        assert config.chunk_size == 64 * KB
        assert config.bucket_size == 8 * MB
        assert config.num_workers == 8
        assert config.redundant_lock_opt is True

    def test_load_checkpoint(self, clean_env, monkeypatch):
        """Test checkpoint variables."""
        monkeypatch.setenv("MR1S_CHECKPOINT_DIR", "/var/tmp/ckpt")
        monkeypatch.setenv("MR1S_RECOVER", "true")

        config = load_from_env()

        assert config.checkpoint == CheckpointConfig(directory=Path("/var/tmp/ckpt"), recover=True)

    def test_load_skew(self, clean_env, monkeypatch):
        """Test the skew profile variable."""
        monkeypatch.setenv("MR1S_SKEW", "worker0x4")

        config = load_from_env()

        assert config.skew_profile.repeat_for(0, 12) == 4
        assert config.skew_profile.repeat_for(1, 13) == 1

    def test_invalid_workers(self, clean_env, monkeypatch):
        """Test a non-numeric worker count raises ConfigError."""
        monkeypatch.setenv("MR1S_WORKERS", "many")

        with pytest.raises(ConfigError):
            load_from_env()

    def test_invalid_skew(self, clean_env, monkeypatch):
        """Test a malformed skew profile raises ConfigError."""
        monkeypatch.setenv("MR1S_SKEW", "rank0x4")

        with pytest.raises(ConfigError):
            load_from_env()


class TestLoadFromFile:
    """Tests for load_from_file function."""

    def _write(self, content: str) -> Path:
        with tempfile.NamedTemporaryFile(mode="w", suffix=".conf", delete=False) as f:
            f.write(content)
            return Path(f.name)

    def test_load_simple_config(self, clean_env):
        """Test loading a simple config file."""
        config_path = self._write("""
MR1S_WORKERS=4
MR1S_TASK_SIZE=256K
""")
        try:
            config = load_from_file(config_path)

            assert config.num_workers == 4
            assert config.task_size == 256 * KB
        finally:
            config_path.unlink()

    def test_load_config_with_exports_comments_and_quotes(self, clean_env):
        """Test export statements, comments and quoted values."""
        config_path = self._write("""
# Benchmark input
export MR1S_INPUT="/My Data/corpus.txt"
export MR1S_SKEW='worker1x2'
""")
        try:
            config = load_from_file(config_path)

            assert config.filename == Path("/My Data/corpus.txt")
            assert config.skew_profile.workers == {1: 2}
        finally:
            config_path.unlink()

    def test_environment_restored(self, clean_env):
        """Test loading a file leaves the process environment untouched."""
        config_path = self._write("MR1S_WORKERS=16\n")
        try:
            load_from_file(config_path)

            assert "MR1S_WORKERS" not in os.environ
        finally:
            config_path.unlink()

    def test_load_nonexistent_file(self):
        """Test loading nonexistent file raises error."""
        with pytest.raises(ConfigError):
            load_from_file(Path("/nonexistent/mr1s.conf"))
