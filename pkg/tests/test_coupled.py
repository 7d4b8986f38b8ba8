"""Tests for the coupled reference engine."""

import threading
import time

import pytest

from mr1s.config import KB, JobConfig
from mr1s.coupled import CoupledEngine, ExchangePlan, exchange_alltoall, run_job_2s
from mr1s.dataset import CorpusSpec, GenerationReport, generate_corpus, parse_skew
from mr1s.decoupled import run_job
from mr1s.job import EngineError, JobHooks, WorkerStatus
from mr1s.rma import LocalTransport, ProtocolError


def run_ranks(num_workers, body):
    """Run body(ctx) on every rank of a fresh transport; returns results by rank."""
    transport = LocalTransport(num_workers)
    results = {}
    errors = []

    def main(rank: int) -> None:
        try:
            results[rank] = body(transport.context(rank))
        except Exception as e:
            errors.append(e)
            transport.abort(str(e))

    threads = [threading.Thread(target=main, args=(r,)) for r in range(num_workers)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout=10)
    return results, errors


class TestExchange:
    """Tests for the all-to-all exchange."""

    def test_plan_offsets(self):
        """Test receive offsets are prefix sums of the counts."""
        plan = ExchangePlan(send_counts=[1, 2, 3], recv_counts=[4, 0, 5])

        assert plan.offsets == [0, 4, 4]
        assert plan.total_received == 9

    def test_every_pair_delivered(self):
        """Test rank t receives exactly what each rank s sent to t."""
        def body(ctx):
            buckets = [f"{ctx.rank}->{t}".encode() * (t + 1) for t in range(ctx.num_workers)]
            return exchange_alltoall(ctx, buckets)

        results, errors = run_ranks(3, body)

        assert not errors
        for target, (plan, received) in results.items():
            assert received == [f"{s}->{target}".encode() * (target + 1) for s in range(3)]
            assert plan.recv_counts == [len(r) for r in received]

    def test_empty_buckets(self):
        """Test zero-length payloads are exchanged."""
        results, errors = run_ranks(2, lambda ctx: exchange_alltoall(ctx, [b"", b""]))

        assert not errors
        assert all(received == [b"", b""] for _, received in results.values())

    def test_wrong_bucket_count(self):
        """Test one bucket per rank is required."""
        results, errors = run_ranks(1, lambda ctx: exchange_alltoall(ctx, [b"", b""]))

        assert isinstance(errors[0], ProtocolError)

    def test_length_mismatch(self):
        """Test a payload that disagrees with its announced count is rejected."""
        def body(ctx):
            if ctx.rank == 1:
                ctx.transport.send(1, 0, "alltoall-counts", 10)
                ctx.transport.send(1, 1, "alltoall-counts", 0)
                ctx.transport.send(1, 0, "alltoall-data", b"short")
                ctx.transport.send(1, 1, "alltoall-data", b"")
                return None
            return exchange_alltoall(ctx, [b"", b""])

        results, errors = run_ranks(2, body)

        assert any(isinstance(e, ProtocolError) for e in errors)


class TestCoupledEngine:
    """End-to-end tests against the generated oracle."""

    @pytest.mark.parametrize("num_workers", [1, 2, 3, 4, 8])
    def test_matches_oracle(self, make_config, small_corpus, word_count, num_workers):
        """Test the result equals the oracle."""
        summary = run_job_2s(make_config(num_workers=num_workers), word_count)

        assert summary.result_digest == small_corpus.digest
        assert summary.engine == "2S"

    def test_same_digest_as_decoupled(self, make_config, word_count):
        """Test both engines agree on the same input."""
        cfg = make_config(num_workers=4, skew_profile=parse_skew("worker0x2"))

        assert run_job_2s(cfg, word_count).result_digest == run_job(cfg, word_count).result_digest

    def test_barriers_separate_phases(self, make_config, word_count):
        """Test the coupled engine synchronises globally between phases."""
        summary = run_job_2s(make_config(num_workers=4), word_count)

        assert summary.barriers >= 4

    def test_no_reduce_before_slowest_map(self, make_config, small_corpus, word_count):
        """Test no worker reduces before the slow worker has finished mapping."""
        cfg = make_config(
            num_workers=4, skew_profile=parse_skew("worker0x4"), task_delay_s=0.005
        )

        slow_task_done: list[float] = []
        reduce_started: list[float] = []

        def task_done(rank, task):
            if rank == 0:
                slow_task_done.append(time.monotonic())

        def status(rank, new_status):
            if new_status is WorkerStatus.REDUCE:
                reduce_started.append(time.monotonic())

        hooks = JobHooks(on_status_change=status, on_task_complete=task_done)
        summary = CoupledEngine(cfg, word_count, hooks).run()

        assert min(reduce_started) >= max(slow_task_done)
        assert summary.ownership_transfers == 0
        assert summary.result_digest == small_corpus.digest

    def test_empty_input(self, make_config, write_text, word_count):
        """Test an empty file yields an empty result."""
        summary = run_job_2s(make_config(filename=write_text(b""), num_workers=3), word_count)

        assert summary.result == []

    def test_task_hook_failure(self, make_config, word_count):
        """Test a failing worker aborts the coupled job too."""
        def fail(rank: int, task) -> None:
            if rank == 2:
                raise RuntimeError("bad task")

        engine = CoupledEngine(
            make_config(num_workers=4), word_count, JobHooks(on_task_complete=fail)
        )
        with pytest.raises(EngineError, match="rank 2"):
            engine.run()


@pytest.fixture(scope="module")
def zipf_corpora(tmp_path_factory) -> dict[float, GenerationReport]:
    """A uniform and a steep Zipf corpus, generated once per module."""
    root = tmp_path_factory.mktemp("zipf")
    return {
        s: generate_corpus(
            CorpusSpec(size=64 * KB, vocab_size=800, zipf_s=s, seed=13), root / f"zipf-{s}.txt"
        )
        for s in (0.0, 1.2)
    }


class TestOracleMatrix:
    """Both engines against the oracle over workers, skew, word distribution and chunking."""

    @pytest.mark.parametrize("chunk_size", [64, KB])
    @pytest.mark.parametrize("skew", ["none", "worker0x4"])
    @pytest.mark.parametrize("zipf_s", [0.0, 1.2])
    @pytest.mark.parametrize("num_workers", [1, 2, 3, 4, 8, 16])
    def test_both_engines_match_oracle(
        self, zipf_corpora, word_count, num_workers, zipf_s, skew, chunk_size
    ):
        """Test the final table equals the oracle exactly."""
        corpus = zipf_corpora[zipf_s]
        cfg = JobConfig(
            filename=corpus.path,
            task_size=2 * KB,
            chunk_size=chunk_size,
            bucket_size=8 * KB,
            win_size=4 * KB,
            num_workers=num_workers,
            boundary_overlap=256,
            skew_profile=parse_skew(skew),
        )

        for run in (run_job, run_job_2s):
            summary = run(cfg, word_count)

            assert dict(summary.result) == corpus.counts
            assert summary.result_digest == corpus.digest
