"""
Command-line entry point.

    traveltime simulate       synthetic network, training trajectories, held-out pieces, ground truth
    traveltime run-offline    batch EM step by step over a trajectory file
    traveltime run-streaming  replay a trajectory file through the micro-batch engine
    traveltime evaluate       score held-out pieces against an estimate file
    traveltime bench          highest replay rate sustained without deadline misses

Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from functools import wraps
from typing import Callable, List, Optional, Sequence

from traveltime import create_app
from traveltime.config import RunConfig, describe_config, load_run_config
from traveltime.errors import DataError, TravelTimeError
from traveltime.evaluation import EvalReport, compare_reports, cut_readings, cut_trajectories, evaluate, generate, split_by_trip
from traveltime.io import (
    EstimateWriter,
    MetricsWriter,
    ReadStats,
    ReplaySource,
    StepMetricsWriter,
    load_model,
    load_network,
    read_trajectories,
    replay,
    write_bench,
    write_ground_truth,
    write_network,
    write_report,
    write_trajectories,
)
from traveltime.pipeline import bench, run_offline, run_streaming
from traveltime.streaming import WorkerPool

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 4


def handle_command_errors(func: Callable[[argparse.Namespace, RunConfig], int]) -> Callable[[argparse.Namespace, RunConfig], int]:
    """Map package errors to their exit codes; anything else is logged and exits with 4."""

    @wraps(func)
    def wrapper(args: argparse.Namespace, cfg: RunConfig) -> int:
        try:
            return func(args, cfg)
        except TravelTimeError as e:
            logger.error(f"{func.__name__} failed: {e}")
            return e.exit_code
        except Exception as e:
            logger.exception(f"Unexpected error in {func.__name__}: {e}")
            return EXIT_FAILURE

    return wrapper


@handle_command_errors
def cmd_simulate(args: argparse.Namespace, cfg: RunConfig) -> int:
    data = generate(cfg.synthetic)
    train, test = split_by_trip(data.trips, cfg.eval.holdout_fraction, cfg.seed)
    train_trajectories = sorted((t.measurement() for t in train if t.duration_s > 0), key=lambda m: (m.start_time, m.id))
    pieces = sorted(cut_trajectories(test, cfg.eval.piece_lengths_s), key=lambda m: (m.start_time, m.id))

    paths = cfg.paths
    write_network(data.network, paths.resolve("network", "network.csv"))
    n_train = write_trajectories(train_trajectories, paths.resolve("trajectories", "trajectories.jsonl"))
    n_test = write_trajectories(pieces, paths.resolve("test_trajectories", "test_pieces.jsonl"))
    write_ground_truth(data.ground_truth, paths.resolve("ground_truth", "ground_truth.jsonl"))
    logger.info(
        f"Wrote {len(data.network)} links, {n_train} training trajectories and {n_test} held-out pieces to {paths.output_dir}"
    )
    return EXIT_OK


@handle_command_errors
def cmd_run_offline(args: argparse.Namespace, cfg: RunConfig) -> int:
    paths = cfg.paths
    net = load_network(paths.resolve("network", "network.csv"))
    stats = ReadStats()
    trajectories = read_trajectories(paths.resolve("trajectories", "trajectories.jsonl"), stats)
    with EstimateWriter(paths.resolve("estimates", "estimates.jsonl"), net) as estimates, StepMetricsWriter(
        paths.resolve("metrics", "steps.jsonl")
    ) as steps:

        def on_state(state) -> None:
            estimates.write_state(state)
            steps.write_state(state)

        summary = run_offline(cfg, net, trajectories, on_state=on_state)
    logger.info(
        f"run-offline: {summary.steps} steps, {summary.observations} observations, "
        f"{stats.skipped} malformed lines, {summary.rejected} rejected trajectories"
    )
    return EXIT_OK


@handle_command_errors
def cmd_run_streaming(args: argparse.Namespace, cfg: RunConfig) -> int:
    paths = cfg.paths
    net = load_network(paths.resolve("network", "network.csv"))
    src = ReplaySource(str(paths.resolve("trajectories", "trajectories.jsonl")), cfg.scheduler.rate_multiplier, cfg.scheduler.interval_s)
    stats = ReadStats()
    with EstimateWriter(paths.resolve("estimates", "estimates.jsonl"), net) as estimates, StepMetricsWriter(
        paths.resolve("metrics", "metrics.jsonl").with_name("steps.jsonl")
    ) as steps, MetricsWriter(paths.resolve("metrics", "metrics.jsonl")) as metrics:

        def on_state(state) -> None:
            estimates.write_state(state)
            steps.write_state(state)

        summary = run_streaming(cfg, net, replay(src, stats), on_state=on_state, on_metrics=metrics.write_metrics)
    logger.info(
        f"run-streaming: {summary.batches} batches, {summary.steps} steps, {summary.observations} observations, "
        f"{summary.deadline_misses} deadline misses, {stats.skipped} malformed lines"
    )
    return EXIT_OK


def _load_pieces(path, readings: bool, piece_lengths_s: Sequence[float]) -> list:
    pieces = list(read_trajectories(path))
    if not readings:
        return pieces
    readings_sorted = sorted(pieces, key=lambda r: r.start_time)
    out = []
    for p in piece_lengths_s:
        out.extend(cut_readings(readings_sorted, p))
    return out


def _evaluate_file(cfg: RunConfig, net, estimates_path, pieces, at_time: Optional[float], pool: WorkerPool) -> EvalReport:
    model = load_model(estimates_path, net, at_time)
    logger.info(f"Scoring {len(pieces)} pieces against estimates at t={model.time_index:.0f} from {estimates_path}")
    return evaluate(model, pieces, net, cfg.series, cfg.eval, map_fn=pool.map)


@handle_command_errors
def cmd_evaluate(args: argparse.Namespace, cfg: RunConfig) -> int:
    paths = cfg.paths
    net = load_network(paths.resolve("network", "network.csv"))
    test_path = paths.resolve("test_trajectories", "test_pieces.jsonl")
    pieces = _load_pieces(test_path, args.readings, cfg.eval.piece_lengths_s)
    if not pieces:
        raise DataError(f"no held-out pieces in {test_path}")
    report_path = paths.resolve("report", "report.json")
    with WorkerPool(cfg.scheduler.workers, cfg.scheduler.executor) as pool:
        report = _evaluate_file(cfg, net, paths.resolve("estimates", "estimates.jsonl"), pieces, args.time, pool)
        write_report(report, report_path)
        for b in report.buckets:
            l1, ll = b.metrics["l1"], b.metrics["log_likelihood"]
            logger.info(f"{b.label}: n={b.n} L1={l1.value:.2f}s [{l1.ci_low:.2f}, {l1.ci_high:.2f}] loglik={ll.value:.3f}")

        if paths.compare_estimates:
            other = _evaluate_file(cfg, net, paths.compare_estimates, pieces, args.time, pool)
            write_report(other, report_path.with_name(report_path.stem + "_compare.json"))
            table = compare_reports({"estimates": report, "compare_estimates": other})
            table_path = report_path.with_name("comparison.csv")
            table.to_csv(table_path, index=False)
            logger.info(f"Comparison table written to {table_path}")
    return EXIT_OK


@handle_command_errors
def cmd_bench(args: argparse.Namespace, cfg: RunConfig) -> int:
    paths = cfg.paths
    net = load_network(paths.resolve("network", "network.csv"))
    src = ReplaySource(str(paths.resolve("trajectories", "trajectories.jsonl")), 1.0, cfg.scheduler.interval_s)
    result = bench(
        cfg,
        net,
        replay(src),
        horizon_intervals=args.horizon,
        min_rate=args.min_rate,
        max_rate=args.max_rate,
        steps=args.steps,
    )
    out = paths.resolve("metrics", "bench.json")
    write_bench(result, out)
    logger.info(f"bench: x{result.best_rate:.4g} sustained, {result.observations_per_second:.1f} observations/s -> {out}")
    return EXIT_OK


COMMANDS = {
    "simulate": (cmd_simulate, "Generate a synthetic network, trajectories and ground truth."),
    "run-offline": (cmd_run_offline, "Estimate link travel times step by step without the streaming engine."),
    "run-streaming": (cmd_run_streaming, "Replay trajectories through the streaming engine and estimate online."),
    "evaluate": (cmd_evaluate, "Score held-out pieces against an estimate file."),
    "bench": (cmd_bench, "Find the highest replay rate processed without deadline misses."),
}


def build_parser() -> argparse.ArgumentParser:
    epilog = describe_config()
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="JSON run configuration file")
    common.add_argument("-p", "--profile", help="named experiment profile (SlidingBig, SlidingBig1..4)")
    common.add_argument(
        "-s", "--set", dest="overrides", action="append", default=[], metavar="SECTION.FIELD=VALUE",
        help="override one configuration field (repeatable)",
    )
    common.add_argument("--log-level", help="logging level (defaults to LOG_LEVEL)")

    parser = argparse.ArgumentParser(
        prog="traveltime",
        description="Streaming estimation of link travel-time distributions.",
        epilog=epilog,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text, epilog=epilog,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        if name == "evaluate":
            p.add_argument("--time", type=float, default=None, help="score against the estimates at this time (default: last)")
            p.add_argument("--readings", action="store_true", help="held-out file holds consecutive readings to concatenate into pieces")
        if name == "bench":
            p.add_argument("--horizon", type=int, default=60, help="intervals replayed per trial (default: 60)")
            p.add_argument("--min-rate", type=float, default=1.0 / 64, help="lower end of the rate bracket")
            p.add_argument("--max-rate", type=float, default=1024.0, help="upper end of the rate bracket")
            p.add_argument("--steps", type=int, default=12, help="bisection steps (default: 12)")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    create_app(log_level=args.log_level)
    try:
        cfg = load_run_config(args.config, args.profile, args.overrides)
    except TravelTimeError as e:
        logger.error(f"Invalid configuration: {e}")
        return e.exit_code
    func, _ = COMMANDS[args.command]
    return func(args, cfg)


if __name__ == "__main__":
    sys.exit(main())
