"""
End-to-end tests of the command line.
"""
import json

import pytest

from traveltime.cli import build_parser, main
from traveltime.io import load_network, read_estimates, read_metrics, read_step_metrics, read_trajectories


@pytest.fixture()
def argv(fast_overrides):
    def make(command, *extra):
        args = [command]
        for item in fast_overrides:
            args += ["--set", item]
        return args + list(extra)

    return make


@pytest.fixture()
def out(tmp_path):
    return tmp_path / "out"


@pytest.fixture()
def simulated(argv, out):
    assert main(argv("simulate")) == 0
    return out


def test_help_lists_configuration_fields(capsys):
    with pytest.raises(SystemExit):
        build_parser().parse_args(["run-offline", "--help"])

    text = capsys.readouterr().out
    assert "em.num_samples = 100" in text
    assert "SlidingBig" in text


def test_simulate_writes_inputs(simulated):
    net = load_network(simulated / "network.csv")
    train = list(read_trajectories(simulated / "trajectories.jsonl"))
    test = list(read_trajectories(simulated / "test_pieces.jsonl"))

    assert len(net) == 8
    assert train and test
    assert {t.split for t in train} == {"train"}
    assert {t.split for t in test} == {"test"}
    assert (simulated / "ground_truth.jsonl").is_file()


def test_simulate_is_reproducible(argv, simulated, tmp_path):
    again = tmp_path / "again"
    assert main(argv("simulate", "--set", f"paths.output_dir={again}")) == 0

    for name in ("network.csv", "trajectories.jsonl", "test_pieces.jsonl", "ground_truth.jsonl"):
        assert (again / name).read_bytes() == (simulated / name).read_bytes()


def test_offline_then_evaluate(argv, simulated):
    assert main(argv("run-offline")) == 0

    estimates = read_estimates(simulated / "estimates.jsonl")
    steps = read_step_metrics(simulated / "steps.jsonl")
    assert estimates
    assert len(steps) == len({r.time for r in estimates})

    assert main(argv("evaluate")) == 0
    report = json.loads((simulated / "report.json").read_text())
    assert report["format_version"] == 1
    assert [b["bucket"] for b in report["buckets"]][0] == "[1,3) min"
    assert (simulated / "report.csv").is_file()


def test_streaming_writes_metrics(argv, simulated):
    assert main(argv("run-streaming")) == 0

    metrics = read_metrics(simulated / "metrics.jsonl")
    assert metrics
    assert all({"interval_index", "processing_time_s", "deadline_missed"} <= set(m) for m in metrics)
    assert read_estimates(simulated / "estimates.jsonl")


def test_evaluate_against_two_estimate_files(argv, simulated):
    assert main(argv("run-offline")) == 0
    other = simulated / "other.jsonl"
    assert main(argv("run-offline", "--set", "em.num_iterations=1", "--set", f"paths.estimates={other}")) == 0

    assert main(argv("evaluate", "--set", f"paths.compare_estimates={other}")) == 0
    assert (simulated / "report_compare.json").is_file()
    assert (simulated / "comparison.csv").read_text().startswith("bucket,metric,estimates,compare_estimates")


def test_bench(argv, simulated):
    assert main(argv("bench", "--horizon", "10", "--min-rate", "1", "--max-rate", "2", "--steps", "1")) == 0

    data = json.loads((simulated / "bench.json").read_text())
    assert data["horizon_intervals"] == 10
    assert data["trials"]


def test_exit_codes(argv, out):
    assert main(argv("run-offline")) == 3
    assert main(argv("run-offline", "--set", "em.num_samples=0")) == 2
    assert main(argv("run-offline", "--profile", "Nope")) == 2
