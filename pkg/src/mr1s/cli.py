"""Command-line interface for mr1s.

Usage:
    mr1s gen       # Generate a Zipf corpus and its oracle CSV
    mr1s run       # Run a Word-Count job on the decoupled (1s) or coupled (2s) engine
    mr1s sweep     # Strong or weak scaling sweep over both engines
    mr1s verify    # Compare a stored result with an oracle CSV

Exit codes: 0 ok, 1 usage or configuration error, 2 verification failure,
3 engine abort.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path
from typing import IO, NoReturn

from .bench import (
    DEFAULT_STRONG_SIZE,
    DEFAULT_SWEEP_SKEW,
    DEFAULT_WEAK_BYTES_PER_WORKER,
    ENGINES,
    BenchError,
    CsvSink,
    SweepPlan,
    VerificationError,
    read_result,
    run_repetitions,
    run_sweep,
    scale_to_corpus,
    verify_against_oracle,
    write_result,
)
from .checkpoint import CheckpointError
from .config import (
    CheckpointConfig,
    ConfigError,
    JobConfig,
    load_from_env,
    load_from_file,
    parse_size,
)
from .dataset import CorpusSpec, generate_corpus, oracle_path_for, parse_skew
from .job import EngineError
from .kvcodec import CodecError
from .usecase import WordCount

logger = logging.getLogger(__name__)

# Valid log levels
LOG_LEVELS = ("debug", "info", "warning", "error")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VERIFY = 2
EXIT_ABORT = 3


class _ArgumentParser(argparse.ArgumentParser):
    """Reports usage errors with exit code 1; 2 means a failed verification."""

    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _get_version() -> str:
    """Get package version, with fallback for development."""
    try:
        return version("mr1s")
    except PackageNotFoundError:
        return "dev"


def configure_logging(log_level: str) -> None:
    """Configure logging based on level name."""
    level = getattr(logging, log_level.upper(), logging.WARNING)
    logging.basicConfig(
        level=level,
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )


def load_config(args: argparse.Namespace) -> JobConfig:
    """Load configuration from file or environment.

    Priority: --config flag > environment variables. Command flags are
    applied on top by each command.
    """
    if args.config:
        return load_from_file(Path(args.config))
    return load_from_env()


def _size(value: str) -> int:
    try:
        return parse_size(value)
    except ConfigError as e:
        raise argparse.ArgumentTypeError(str(e)) from e


def _workers_list(value: str) -> tuple[int, ...]:
    try:
        workers = tuple(int(w) for w in value.split(",") if w.strip())
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"invalid workers list: {value}") from e
    if not workers:
        raise argparse.ArgumentTypeError("workers list is empty")
    return workers


def _open_csv(path: str | None) -> IO[str]:
    if path is None or path == "-":
        return sys.stdout
    return open(path, "w", newline="")


def _apply_job_flags(cfg: JobConfig, args: argparse.Namespace) -> None:
    """Override configuration with the flags that were given."""
    if args.workers is not None:
        cfg.num_workers = args.workers
    if args.chunk_size is not None:
        cfg.chunk_size = args.chunk_size
    if args.bucket_size is not None:
        cfg.bucket_size = args.bucket_size
    if args.win_size is not None:
        cfg.win_size = args.win_size
    if args.skew is not None:
        try:
            cfg.skew_profile = parse_skew(args.skew)
        except ValueError as e:
            raise ConfigError(str(e)) from e
    if args.redundant_locks:
        cfg.redundant_lock_opt = True
    if args.task_delay is not None:
        cfg.task_delay_s = args.task_delay
    if args.read_delay is not None:
        cfg.read_delay_s = args.read_delay


def cmd_gen(args: argparse.Namespace) -> int:
    """Generate a corpus and its oracle."""
    spec = CorpusSpec(size=args.size, vocab_size=args.vocab, zipf_s=args.zipf, seed=args.seed)
    problems = spec.validate()
    if problems:
        raise ConfigError("; ".join(problems))
    report = generate_corpus(spec, Path(args.out))
    print(f"Corpus:   {report.path} ({report.size} bytes, {report.token_count} tokens)")
    print(f"Oracle:   {report.oracle_path} ({len(report.counts)} distinct words)")
    print(f"Digest:   {report.digest}")
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    """Run one engine for a number of repetitions."""
    cfg = load_config(args)
    if args.corpus:
        cfg.filename = Path(args.corpus)
    _apply_job_flags(cfg, args)
    if not cfg.filename.is_file():
        raise ConfigError(f"Corpus not found: {cfg.filename}")

    if args.task_size is not None:
        cfg.task_size = args.task_size
    explicit = {
        name for name in ("task_size", "bucket_size", "win_size")
        if getattr(args, name) is not None
    }
    scale_to_corpus(cfg, cfg.filename.stat().st_size, explicit)

    if args.checkpoint_dir:
        cfg.checkpoint = CheckpointConfig(directory=Path(args.checkpoint_dir), recover=args.recover)
    elif args.recover:
        if cfg.checkpoint is None:
            raise ConfigError("--recover requires --checkpoint-dir")
        cfg.checkpoint.recover = True
    if args.engine == "2s" and cfg.checkpoint is not None:
        raise ConfigError("checkpoints are only supported by the 1s engine")
    cfg.require_valid()

    oracle = oracle_path_for(cfg.filename)
    if args.verify and not oracle.exists():
        raise ConfigError(f"Oracle not found: {oracle}")

    uc = WordCount()
    stream = _open_csv(args.csv)
    try:
        summaries = run_repetitions(args.engine, cfg, args.reps, CsvSink(stream), uc)
    finally:
        if stream is not sys.stdout:
            stream.close()

    result = summaries[-1].result
    if args.output:
        write_result(Path(args.output), result, uc)
        logger.info(f"Wrote {len(result)} records to {args.output}")
    if args.print:
        for key, value in result:
            print(uc.format_pair(key, value))
    if args.verify:
        verify_against_oracle(result, oracle)
        print(f"Verified against {oracle}: {len(result)} keys")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    """Strong or weak scaling sweep."""
    cfg = load_config(args)
    _apply_job_flags(cfg, args)
    plan = SweepPlan(
        mode=args.mode,
        workers=args.workers_list,
        corpus_size=args.size,
        bytes_per_worker=args.bytes_per_worker,
        skewed=args.skewed,
        skew=args.skew or DEFAULT_SWEEP_SKEW,
        engines=tuple(args.engines.split(",")),
        reps=args.reps,
        task_size=args.task_size,
    )
    stream = _open_csv(args.csv)
    try:
        run_sweep(plan, cfg, Path(args.workdir), CsvSink(stream))
    finally:
        if stream is not sys.stdout:
            stream.close()
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    """Compare a stored result with an oracle CSV."""
    result_path = Path(args.result)
    if not result_path.exists():
        raise ConfigError(f"Result not found: {result_path}")
    try:
        result = read_result(result_path, WordCount())
    except CodecError as e:
        raise VerificationError(f"{result_path} is not a valid result file: {e}") from e
    verify_against_oracle(result, Path(args.oracle))
    print(f"OK: {len(result)} keys match {args.oracle}")
    return EXIT_OK


def _add_job_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--workers", type=int, default=None, help="Number of workers")
    parser.add_argument("--chunk-size", type=_size, default=None, help="Max bytes per transfer")
    parser.add_argument(
        "--bucket-size", type=_size, default=None, help="Initial key-value window per worker"
    )
    parser.add_argument("--win-size", type=_size, default=None, help="Initial combine window")
    parser.add_argument(
        "--redundant-locks",
        action="store_true",
        help="Lock and unlock every own window after each Map task and after Reduce",
    )
    parser.add_argument(
        "--task-delay", type=float, default=None, help="Simulated compute seconds per map pass"
    )
    parser.add_argument(
        "--read-delay", type=float, default=None, help="Injected seconds per input read"
    )
    parser.add_argument("--reps", type=int, default=1, help="Repetitions per configuration")
    parser.add_argument("--csv", type=str, default=None, help="CSV output file (default: stdout)")


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(
        description="mr1s - decoupled one-sided MapReduce and its coupled baseline",
        prog="mr1s",
    )
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {_get_version()}"
    )
    env_log_level = os.environ.get("LOG_LEVEL", "").lower()
    parser.add_argument(
        "-l", "--log-level",
        choices=LOG_LEVELS,
        default=env_log_level if env_log_level in LOG_LEVELS else "warning",
        help="Set log level (default: warning, or LOG_LEVEL env var)",
    )
    parser.add_argument(
        "-c", "--config", type=str, help="Path to config file"
    )

    subparsers = parser.add_subparsers(dest="command", help="Command to run")

    # gen command
    gen_parser = subparsers.add_parser("gen", help="Generate a Zipf corpus and its oracle")
    gen_parser.add_argument("--size", type=_size, required=True, help="Corpus bytes (e.g. 64M)")
    gen_parser.add_argument("--zipf", type=float, default=1.1, help="Zipf exponent")
    gen_parser.add_argument("--seed", type=int, default=42, help="Random seed")
    gen_parser.add_argument("--vocab", type=int, default=50_000, help="Vocabulary size")
    gen_parser.add_argument("--out", type=str, required=True, help="Corpus path")

    # run command
    run_parser = subparsers.add_parser("run", help="Run a Word-Count job")
    run_parser.add_argument("corpus", nargs="?", help="Input file (default: MR1S_INPUT)")
    run_parser.add_argument("--engine", choices=sorted(ENGINES), default="1s")
    run_parser.add_argument("--task-size", type=_size, default=None, help="Bytes per map task")
    run_parser.add_argument(
        "--skew", type=str, default=None, help="Imbalance profile, e.g. worker0x4"
    )
    run_parser.add_argument("--checkpoint-dir", type=str, default=None)
    run_parser.add_argument(
        "--recover", action="store_true", help="Resume from images in the checkpoint directory"
    )
    run_parser.add_argument(
        "--verify", action="store_true", help="Compare with <corpus>.oracle.csv"
    )
    run_parser.add_argument("--output", type=str, default=None, help="Write the result records")
    run_parser.add_argument("--print", action="store_true", help="Print the (word, count) table")
    _add_job_flags(run_parser)

    # sweep command
    sweep_parser = subparsers.add_parser("sweep", help="Strong or weak scaling sweep")
    sweep_parser.add_argument("--mode", choices=("strong", "weak"), required=True)
    sweep_parser.add_argument(
        "--workers-list", type=_workers_list, default=(1, 2, 4, 8), help="e.g. 1,2,4,8"
    )
    sweep_parser.add_argument(
        "--size", type=_size, default=DEFAULT_STRONG_SIZE, help="Corpus bytes (strong mode)"
    )
    sweep_parser.add_argument(
        "--bytes-per-worker", type=_size, default=DEFAULT_WEAK_BYTES_PER_WORKER,
        help="Corpus bytes per worker (weak mode)",
    )
    sweep_parser.add_argument("--skewed", action="store_true", help="Apply the skew profile")
    sweep_parser.add_argument(
        "--skew", type=str, default=None,
        help=f"Profile for --skewed (default: {DEFAULT_SWEEP_SKEW})",
    )
    sweep_parser.add_argument("--engines", type=str, default="1s,2s")
    sweep_parser.add_argument("--task-size", type=_size, default=None)
    sweep_parser.add_argument(
        "--workdir", type=str, default="mr1s-sweep", help="Directory for generated corpora"
    )
    _add_job_flags(sweep_parser)

    # verify command
    verify_parser = subparsers.add_parser("verify", help="Compare a result with an oracle")
    verify_parser.add_argument("--result", type=str, required=True)
    verify_parser.add_argument("--oracle", type=str, required=True)

    return parser


def main(argv: list[str] | None = None) -> int:
    """Main entry point."""
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)

    if args.command is None:
        parser.print_help()
        return EXIT_USAGE

    commands = {
        "gen": cmd_gen,
        "run": cmd_run,
        "sweep": cmd_sweep,
        "verify": cmd_verify,
    }

    try:
        return commands[args.command](args)
    except VerificationError as e:
        logger.error(f"Verification failed: {e}")
        print(f"FAILED: {e}", file=sys.stderr)
        return EXIT_VERIFY
    except (ConfigError, BenchError) as e:
        logger.error(f"Configuration error: {e}")
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (EngineError, CheckpointError) as e:
        logger.error(f"Job aborted: {e}")
        print(f"Aborted: {e}", file=sys.stderr)
        return EXIT_ABORT
    except KeyboardInterrupt:
        logger.info("Interrupted")
        return 130


if __name__ == "__main__":
    sys.exit(main())
