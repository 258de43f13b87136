"""
Tests for trajectory conversion, decay weights and priors.
"""
import math

import pytest

from traveltime.errors import DegenerateObservationError, FutureObservationError, InvalidRecordError, UnknownLinkError
from traveltime.gamma_stats import GammaParams, path_log_likelihood
from traveltime.models import (
    WEEK_S,
    ConversionStats,
    DecayConfig,
    Observation,
    PriorConfig,
    activation_vector,
    decay_weight,
    observations_from_trajectories,
    prior_gamma,
    prior_params,
    prior_table,
    weekday_slot,
)

from tests.conftest import MONDAY


def test_activation_vector_partial_end_links(net, trajectory):
    """First and last links are covered partially, interior links fully"""
    obs = activation_vector(trajectory(), net)

    assert obs.links == (0, 1, 2)
    assert obs.alpha == pytest.approx((0.75, 1.0, 0.5))
    assert obs.duration_s == 40.0
    assert obs.time == MONDAY


def test_activation_vector_single_link(net, trajectory):
    obs = activation_vector(trajectory(path=("D",), offset_start_m=70.0, offset_end_m=420.0), net)

    assert obs.links == (3,)
    assert obs.alpha == pytest.approx((0.5,))


def test_activation_vector_drops_zero_coverage(net, trajectory):
    """A trajectory ending exactly at the start of its last link does not activate it"""
    obs = activation_vector(trajectory(path=("A", "B"), offset_start_m=0.0, offset_end_m=0.0), net)

    assert obs.links == (0,)
    assert obs.alpha == (1.0,)

def test_activation_vector_leaves_out_sliver_end_links(net, trajectory):
    """A path starting 1 mm before the end of its first link skips that link"""
    obs = activation_vector(trajectory(offset_start_m=100.0 - 1e-3), net)

    assert obs.links == (1, 2)
    assert obs.alpha == pytest.approx((1.0, 0.5))
    assert math.isfinite(path_log_likelihood(obs, {1: GammaParams(2.0, 10.0), 2: GammaParams(2.0, 5.0)}))


def test_activation_vector_keeps_best_covered_sliver(net, trajectory):
    obs = activation_vector(trajectory(path=("A", "B"), offset_start_m=100.0 - 1e-3, offset_end_m=1e-3), net)

    assert obs.links == (0,)
    assert obs.alpha == pytest.approx((1e-5,))


def test_activation_vector_single_link_sliver_is_kept(net, trajectory):
    obs = activation_vector(trajectory(path=("B",), offset_start_m=10.0, offset_end_m=10.0 + 2e-3), net)

    assert obs.links == (1,)
    assert obs.alpha == pytest.approx((1e-5,))



def test_activation_vector_errors(net, trajectory):
    with pytest.raises(UnknownLinkError):
        activation_vector(trajectory(path=("A", "Z")), net)
    with pytest.raises(DegenerateObservationError):
        activation_vector(trajectory(path=("B",), offset_start_m=80.0, offset_end_m=80.0), net)
    with pytest.raises(InvalidRecordError):
        activation_vector(trajectory(offset_start_m=150.0), net)
    with pytest.raises(InvalidRecordError):
        activation_vector(trajectory(path=("A", "B", "A")), net)


def test_invalid_trajectory_rejected(trajectory):
    with pytest.raises(InvalidRecordError):
        trajectory(duration_s=0.0)
    with pytest.raises(InvalidRecordError):
        trajectory(path=())


def test_observation_invariants():
    with pytest.raises(InvalidRecordError):
        Observation("o", (0, 0), (0.5, 0.5), 10.0, 0.0)
    with pytest.raises(InvalidRecordError):
        Observation("o", (0,), (1.5,), 10.0, 0.0)


def test_conversion_counts_rejections(net, trajectory):
    stats = ConversionStats()
    good = trajectory(id="good")
    bad = trajectory(id="bad", path=("Z",))

    out = list(observations_from_trajectories([good, bad], net, stats))

    assert [o.id for o in out] == ["good"]
    assert stats.converted == 1
    assert stats.rejected == 1
    assert stats.reasons == {"UnknownLinkError": 1}


def test_decay_weight_edges():
    """Weight is 1 now and equals the terminal weight at the edge of each window"""
    cfg = DecayConfig(day_window_s=7200.0, week_window_count=1, terminal_weight=0.2)
    t = MONDAY + 12 * 3600

    assert decay_weight(t, t, cfg) == pytest.approx(1.0)
    assert decay_weight(t - 7200.0, t, cfg) == pytest.approx(0.2)
    assert decay_weight(t - WEEK_S, t, cfg) == pytest.approx(0.2)
    assert decay_weight(t - WEEK_S - 7200.0, t, cfg) == pytest.approx(0.04)


def test_decay_weight_is_monotone_in_age():
    cfg = DecayConfig()
    t = MONDAY + 12 * 3600
    weights = [decay_weight(t - age, t, cfg) for age in (0.0, 60.0, 600.0, 3600.0)]

    assert weights == sorted(weights, reverse=True)


def test_decay_weight_rejects_future():
    with pytest.raises(FutureObservationError):
        decay_weight(MONDAY + 1.0, MONDAY, DecayConfig())


def test_weekday_slot():
    assert weekday_slot(MONDAY, 1200.0) == (0, 0)
    assert weekday_slot(MONDAY + 3600.0, 1200.0) == (0, 3)
    assert weekday_slot(MONDAY + 6 * 86400.0 + 86399.0, 1200.0) == (6, 71)
    # Local time shifts the day boundary.
    assert weekday_slot(MONDAY - 1800.0, 1200.0, tz_offset_s=3600.0) == (0, 1)


def test_prior_params(net):
    mean, sd = prior_params(net.links[3], PriorConfig(speed_fraction=0.7))

    assert mean == pytest.approx(100.0)
    assert sd == pytest.approx(60.0)

    mean, sd = prior_params(net.links[3], PriorConfig(speed_fraction=0.7, min_stddev_s=10.0))
    assert sd == pytest.approx(50.0)


def test_prior_gamma_moments():
    p = prior_gamma(100.0, 60.0)

    assert p.mean == pytest.approx(100.0)
    assert p.stddev == pytest.approx(60.0)


def test_prior_table(net):
    table = prior_table(net)

    assert len(table) == 4
    assert list(table) == [0, 1, 2, 3]
    assert table[3] == prior_params(net.links[3])
    assert math.isclose(table.gamma(0).mean, table[0][0])
    with pytest.raises(KeyError):
        table[4]
