"""Fixtures for integration tests.

These tests drive the installed package through `python3 -m mr1s.cli` in a
subprocess, exactly as a user would from a shell.

Run with: pytest -m integration
"""

from __future__ import annotations

import os
import subprocess
from dataclasses import dataclass
from pathlib import Path

import pytest


@dataclass
class IntegrationTestEnv:
    """Test environment with isolated paths."""

    root: Path

    @property
    def corpus_path(self) -> Path:
        return self.root / "corpus.txt"

    @property
    def oracle_path(self) -> Path:
        return self.root / "corpus.oracle.csv"

    @property
    def checkpoint_dir(self) -> Path:
        return self.root / "ckpt"

    @property
    def config_path(self) -> Path:
        return self.root / "mr1s.conf"


@pytest.fixture
def test_env(tmp_path: Path) -> IntegrationTestEnv:
    """Create an isolated environment with a small-scale config file."""
    env = IntegrationTestEnv(root=tmp_path)
    env.config_path.write_text(
        "# Small windows so desk-scale corpora still grow bucket chains\n"
        "export MR1S_CHUNK_SIZE=16K\n"
        "export MR1S_BUCKET_SIZE=256K\n"
        "export MR1S_WIN_SIZE=16K\n"
    )
    return env


@pytest.fixture
def cli_runner(test_env: IntegrationTestEnv):
    """Return a function to run CLI commands with the test config."""

    def run(*args: str, check: bool = True) -> subprocess.CompletedProcess:
        """Run the mr1s CLI with the test config.

        Args:
            *args: Command arguments (e.g., "run", "--engine", "2s")
            check: If True, raise on non-zero exit code

        Returns:
            CompletedProcess with stdout/stderr captured
        """
        cmd = [
            "python3", "-m", "mr1s.cli",
            "-c", str(test_env.config_path),
            *args,
        ]
        env = {k: v for k, v in os.environ.items() if not k.startswith("MR1S_")}
        result = subprocess.run(
            cmd,
            capture_output=True,
            text=True,
            cwd=test_env.root,
            env=env,
        )
        if check and result.returncode != 0:
            # Print output for debugging before raising
            print(f"Command failed: {' '.join(cmd)}")
            print(f"stdout: {result.stdout}")
            print(f"stderr: {result.stderr}")
            raise subprocess.CalledProcessError(
                result.returncode,
                cmd,
                result.stdout,
                result.stderr,
            )
        return result

    return run


@pytest.fixture
def generated_env(test_env: IntegrationTestEnv, cli_runner) -> IntegrationTestEnv:
    """Test environment with a 1 MiB corpus and its oracle."""
    cli_runner("gen", "--size", "1M", "--vocab", "5000", "--out", str(test_env.corpus_path))
    return test_env
