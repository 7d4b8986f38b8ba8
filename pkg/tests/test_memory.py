"""Tests for resident memory sampling."""

import time
from unittest.mock import MagicMock, patch

import pytest

from mr1s.memory import MemoryReading, MockMemorySampler, PsutilMemorySampler


class TestMemoryReading:
    """Tests for MemoryReading."""

    def test_str(self):
        """Test string representation."""
        reading = MemoryReading(rss_bytes=64 * 1024 * 1024, phase="combine", timestamp=0.0)

        assert str(reading) == "64.0 MiB during combine"


class TestMockMemorySampler:
    """Tests for MockMemorySampler."""

    def test_peak_uses_last_phase(self):
        """Test the mock reports its fixed size in the latest phase."""
        sampler = MockMemorySampler(rss_bytes=1000)

        sampler.set_phase("map")
        sampler.set_phase("combine")

        assert sampler.peak() == MemoryReading(1000, "combine", 0.0)
        assert sampler.phases == ["map", "combine"]

    def test_unavailable(self):
        """Test an unavailable sampler reports no peak, not zero."""
        assert MockMemorySampler(available=False).peak() is None

    def test_start_stop(self):
        """Test start/stop toggle the running flag."""
        sampler = MockMemorySampler()

        sampler.start()
        assert sampler.running is True

        sampler.stop()
        assert sampler.running is False


class TestPsutilMemorySampler:
    """Tests for PsutilMemorySampler."""

    def test_invalid_rate(self):
        """Test the sampling rate must be positive."""
        with pytest.raises(ValueError):
            PsutilMemorySampler(sample_hz=0)

    def test_sample_tracks_peak_and_phase(self):
        """Test the peak keeps the phase current when it was observed."""
        process = MagicMock()
        process.memory_info.side_effect = [
            MagicMock(rss=100), MagicMock(rss=300), MagicMock(rss=200)
        ]
        with patch.object(PsutilMemorySampler, "_open_process", return_value=process):
            sampler = PsutilMemorySampler()

        sampler.set_phase("map")
        sampler.sample()
        sampler.set_phase("combine")
        sampler.sample()
        sampler.set_phase("done")
        sampler.sample()

        peak = sampler.peak()
        assert peak is not None
        assert peak.rss_bytes == 300
        assert peak.phase == "combine"

    def test_unavailable_process(self):
        """Test a missing platform counter gives no samples."""
        with patch.object(PsutilMemorySampler, "_open_process", return_value=None):
            sampler = PsutilMemorySampler()

        sampler.start()
        sampler.stop()

        assert sampler.is_available() is False
        assert sampler.sample() is None
        assert sampler.peak() is None

    def test_read_failure_is_not_a_sample(self):
        """Test an RSS read error is skipped."""
        process = MagicMock()
        process.memory_info.side_effect = OSError("gone")
        with patch.object(PsutilMemorySampler, "_open_process", return_value=process):
            sampler = PsutilMemorySampler()

        assert sampler.sample() is None
        assert sampler.peak() is None

    def test_background_sampling(self):
        """Test the thread samples this process at the configured rate."""
        sampler = PsutilMemorySampler(sample_hz=100)
        if not sampler.is_available():
            pytest.skip("psutil cannot read this process")

        sampler.start()
        buffer = bytearray(8 * 1024 * 1024)
        time.sleep(0.1)
        sampler.stop()

        peak = sampler.peak()
        assert peak is not None
        assert peak.rss_bytes >= len(buffer)
        assert sampler._thread is None
