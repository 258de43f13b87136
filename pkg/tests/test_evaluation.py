"""
Tests for the synthetic generator, trajectory cutting and held-out scoring.
"""
import math

import numpy as np
import pytest

from traveltime.em import ModelState
from traveltime.errors import ConfigError, InvalidRecordError
from traveltime.evaluation import (
    EvalConfig,
    PieceScore,
    SyntheticSpec,
    SyntheticTrip,
    compare_reports,
    cut_readings,
    cut_trajectories,
    evaluate,
    generate,
    score_piece,
    split_by_trip,
    summarize,
)
from traveltime.gamma_stats import GammaParams
from traveltime.models import activation_vector

from tests.conftest import MONDAY


@pytest.fixture(scope="module")
def data():
    return generate(SyntheticSpec(n_links=12, trips_per_hour=120.0, hours=2.0, links_per_trip_max=4, seed=3))


@pytest.fixture()
def truth_params(data):
    return {data.network.link_index[k]: p for k, p in data.ground_truth.items()}


def _trip(**kw):
    base = dict(
        id="trip",
        start_time=MONDAY,
        path=("A", "B", "C"),
        lengths_m=(100.0, 200.0, 100.0),
        link_times_s=(20.0, 40.0, 20.0),
        offset_start_m=50.0,
        offset_end_m=50.0,
        split="test",
    )
    base.update(kw)
    return SyntheticTrip(**base)


def test_generate_is_deterministic(data):
    again = generate(SyntheticSpec(n_links=12, trips_per_hour=120.0, hours=2.0, links_per_trip_max=4, seed=3))

    assert again.trajectories == data.trajectories
    assert again.ground_truth == data.ground_truth
    assert len(data.network) == 12
    assert set(data.ground_truth) == {l.id for l in data.network.links}


def test_generated_trajectories_are_valid(data):
    starts = [t.start_time for t in data.trajectories]

    assert starts == sorted(starts)
    for t in data.trajectories:
        obs = activation_vector(t, data.network)
        assert obs.duration_s > 0


def test_synthetic_spec_validation():
    with pytest.raises(ConfigError):
        SyntheticSpec(n_links=2)
    with pytest.raises(ConfigError):
        SyntheticSpec(correlation=1.0)
    with pytest.raises(ConfigError):
        SyntheticSpec(n_links=8, links_per_trip_max=5)


def test_correlated_trips_keep_marginal_means():
    spec = SyntheticSpec(n_links=8, trips_per_hour=4000.0, hours=1.0, links_per_trip_min=1, links_per_trip_max=1, correlation=0.5, seed=9)
    data = generate(spec)
    idx = data.trips[0].path[0]
    times = [t.link_times_s[0] for t in data.trips if t.path[0] == idx]

    assert np.mean(times) == pytest.approx(data.ground_truth[idx].mean, rel=0.15)


def test_split_by_trip_is_disjoint(data):
    train, test = split_by_trip(data.trips, 0.25, seed=1)

    assert len(train) + len(test) == len(data.trips)
    assert not {t.id for t in train} & {t.id for t in test}
    assert {t.split for t in train} == {"train"}
    assert {t.split for t in test} == {"test"}
    with pytest.raises(ConfigError):
        split_by_trip(data.trips, 1.0)


def test_cut_trip_into_pieces():
    """A 60 s trip makes two 30 s pieces"""
    trip = _trip()
    assert trip.duration_s == pytest.approx(10.0 + 40.0 + 10.0)

    pieces = cut_trajectories([trip], [30.0])

    assert [p.id for p in pieces] == ["trip/30/0", "trip/30/1"]
    first, second = pieces
    assert first.duration_s == 30.0
    assert first.path == ("A", "B")
    assert first.offset_start_m == pytest.approx(50.0)
    assert first.offset_end_m == pytest.approx(100.0)
    assert second.start_time == MONDAY + 30.0
    assert second.path == ("B", "C")
    assert second.offset_start_m == pytest.approx(100.0)
    assert second.offset_end_m == pytest.approx(50.0)
    assert {p.split for p in pieces} == {"test"}


def test_cut_pieces_are_valid_observations(data):
    pieces = cut_trajectories(data.trips[:50], [60.0, 300.0])

    assert pieces
    for p in pieces:
        _, length, _ = p.id.rsplit("/", 2)
        assert p.duration_s == float(length)
        activation_vector(p, data.network)


def test_cut_readings_joins_consecutive_readings():
    readings = cut_trajectories([_trip(link_times_s=(20.0, 40.0, 40.0))], [10.0])
    # Drop one reading to make a gap.
    readings = readings[:2] + readings[3:]

    pieces = cut_readings(readings, 20.0)

    assert all(p.duration_s == pytest.approx(20.0) for p in pieces)
    assert pieces[0].start_time == MONDAY
    assert pieces[0].path == ("A", "B")
    assert pieces[1].start_time == MONDAY + 30.0
    assert len(pieces) == len(readings[2:]) // 2 + 1


def test_score_piece(net, trajectory):
    params = {i: GammaParams(4.0, 5.0) for i in range(4)}
    piece = trajectory(path=("A", "B"), offset_start_m=50.0, offset_end_m=100.0, duration_s=25.0, split="test")

    score = score_piece(piece, net, params)

    assert score.predicted_mean_s == pytest.approx(0.5 * 20.0 + 0.5 * 20.0)
    assert score.predicted_stddev_s == pytest.approx(math.sqrt((0.5 * 10.0) ** 2 * 2))
    assert score.abs_error == pytest.approx(5.0)
    assert math.isfinite(score.log_likelihood)
    assert score_piece(piece, net, {0: params[0]}) == "MissingParametersError"
    assert score_piece(trajectory(path=("Z",)), net, params) == "UnknownLinkError"


def _score(duration, mean=None):
    mean = duration if mean is None else mean
    return PieceScore(f"p{duration}", duration, mean, 10.0, -3.0)


def test_summarize_buckets_by_duration():
    scores = [_score(60.0, 50.0), _score(120.0, 150.0), _score(300.0), _score(1800.0), _score(1830.0), _score(30.0)]

    report = summarize(scores, EvalConfig())

    assert [b.label for b in report.buckets] == ["[1,3) min", "[3,7) min", "[7,14) min", "[14,30] min"]
    first = report.bucket("[1,3) min")
    assert first.n == 2
    assert first.metrics["l1"].value == pytest.approx(20.0)
    assert first.metrics["l2"].value == pytest.approx(math.sqrt((100.0 + 900.0) / 2))
    assert report.bucket("[14,30] min").n == 1
    assert report.bucket("[7,14) min").n == 0
    assert math.isnan(report.bucket("[7,14) min").metrics["l1"].value)
    assert report.excluded == {"out_of_range": 2}
    assert report.n_pieces == 6


def test_report_frame_and_comparison():
    a = summarize([_score(60.0, 50.0), _score(90.0, 80.0)])
    b = summarize([_score(60.0, 55.0), _score(90.0, 85.0)])

    frame = a.to_frame()
    assert list(frame.columns) == ["bucket", "metric", "value", "ci_low", "ci_high", "n"]
    assert len(frame) == 4 * 6

    table = compare_reports({"first": a, "second": b})
    row = table[(table["bucket"] == "[1,3) min") & (table["metric"] == "l1")].iloc[0]
    assert row["first"] == pytest.approx(10.0)
    assert row["second"] == pytest.approx(5.0)


def test_evaluate_with_ground_truth(data, truth_params):
    _, test = split_by_trip(data.trips, 0.3, seed=2)
    pieces = cut_trajectories(test, [60.0, 300.0])
    model = ModelState(time_index=0.0, params=truth_params)

    report = evaluate(model, pieces, data.network)

    assert report.n_pieces + sum(v for k, v in report.excluded.items() if k != "out_of_range") == len(pieces)
    assert report.bucket("[1,3) min").n > 0
    assert math.isfinite(report.bucket("[1,3) min").metrics["log_likelihood"].value)


def test_evaluate_rejects_training_pieces(net, trajectory):
    with pytest.raises(InvalidRecordError):
        evaluate({}, [trajectory(split="train")], net)


def _bucket_metric(correlation, metric):
    spec = SyntheticSpec(
        n_links=200,
        length_min_m=400.0,
        length_max_m=500.0,
        speed_min_mps=10.0,
        speed_max_mps=12.0,
        shape_min=8.0,
        shape_max=16.0,
        congestion_min=1.5,
        congestion_max=1.8,
        trips_per_hour=300.0,
        hours=1.0,
        links_per_trip_min=20,
        links_per_trip_max=40,
        correlation=correlation,
        seed=11,
    )
    data = generate(spec)
    _, test = split_by_trip(data.trips, 0.5, seed=4)
    pieces = cut_trajectories(test, [60.0, 300.0, 600.0, 1200.0])
    truth = {data.network.link_index[k]: p for k, p in data.ground_truth.items()}

    report = evaluate(truth, pieces, data.network)

    buckets = [report.bucket(label) for label in ("[1,3) min", "[3,7) min", "[7,14) min", "[14,30] min")]
    assert all(b.n >= 30 for b in buckets)
    return [b.metrics[metric] for b in buckets]


@pytest.mark.slow
def test_log_likelihood_falls_with_piece_length_on_correlated_trips():
    values = [est.value for est in _bucket_metric(0.5, "log_likelihood")]

    assert all(later < earlier for earlier, later in zip(values, values[1:])), values


@pytest.mark.slow
def test_normalized_log_likelihood_is_flat_on_independent_trips():
    """Without correlation the standardized fit is the same at every piece length"""
    estimates = _bucket_metric(0.0, "normalized_log_likelihood")

    assert max(e.ci_low for e in estimates) <= min(e.ci_high for e in estimates), [e.as_list() for e in estimates]
