"""Resident memory sampling for job runs.

A background thread samples the process resident set size and keeps the
peak, together with the phase label that was current when the peak was
observed. Engines set the label as workers change status.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass
from typing import Protocol

logger = logging.getLogger(__name__)

DEFAULT_SAMPLE_HZ = 20.0


@dataclass
class MemoryReading:
    """A resident set sample."""

    rss_bytes: int
    phase: str
    timestamp: float

    def __str__(self) -> str:
        return f"{self.rss_bytes / (1024 * 1024):.1f} MiB during {self.phase}"


class MemorySampler(Protocol):
    """Protocol for peak memory sampling."""

    def start(self) -> None:
        """Start background sampling."""
        ...

    def stop(self) -> None:
        """Stop background sampling."""
        ...

    def set_phase(self, phase: str) -> None:
        """Label subsequent samples."""
        ...

    def peak(self) -> MemoryReading | None:
        """Highest sample so far, or None if sampling is unavailable."""
        ...


class PsutilMemorySampler:
    """Samples this process's RSS through psutil."""

    def __init__(self, sample_hz: float = DEFAULT_SAMPLE_HZ):
        if sample_hz <= 0:
            raise ValueError("sample_hz must be positive")
        self.interval = 1.0 / sample_hz
        self._phase = "init"
        self._peak: MemoryReading | None = None
        self._lock = threading.Lock()
        self._thread: threading.Thread | None = None
        self._stop_event = threading.Event()
        self._process = self._open_process()

    @staticmethod
    def _open_process() -> object | None:
        try:
            import psutil

            return psutil.Process()
        except Exception as e:
            logger.warning(f"Memory sampling unavailable: {e}")
            return None

    def is_available(self) -> bool:
        return self._process is not None

    def sample(self) -> MemoryReading | None:
        """Take one sample and update the peak."""
        if self._process is None:
            return None
        try:
            rss = int(self._process.memory_info().rss)  # type: ignore[attr-defined]
        except Exception as e:
            logger.debug(f"Cannot read RSS: {e}")
            return None
        with self._lock:
            reading = MemoryReading(rss, self._phase, time.monotonic())
            if self._peak is None or rss > self._peak.rss_bytes:
                self._peak = reading
        return reading

    def set_phase(self, phase: str) -> None:
        with self._lock:
            self._phase = phase

    def peak(self) -> MemoryReading | None:
        with self._lock:
            return self._peak

    def _sample_loop(self) -> None:
        while not self._stop_event.is_set():
            self.sample()
            self._stop_event.wait(timeout=self.interval)

    def start(self) -> None:
        if self._thread is not None or not self.is_available():
            return
        self._stop_event.clear()
        self.sample()
        self._thread = threading.Thread(target=self._sample_loop, name="rss-sampler", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        if self._thread is None:
            return
        self._stop_event.set()
        self._thread.join(timeout=5)
        self._thread = None
        self.sample()


class MockMemorySampler:
    """Memory sampler for testing; records the phases it was given."""

    def __init__(self, rss_bytes: int = 64 * 1024 * 1024, available: bool = True):
        self.rss_bytes = rss_bytes
        self.available = available
        self.phases: list[str] = []
        self.running = False

    def start(self) -> None:
        self.running = True

    def stop(self) -> None:
        self.running = False

    def set_phase(self, phase: str) -> None:
        self.phases.append(phase)

    def peak(self) -> MemoryReading | None:
        if not self.available:
            return None
        return MemoryReading(self.rss_bytes, self.phases[-1] if self.phases else "init", 0.0)
