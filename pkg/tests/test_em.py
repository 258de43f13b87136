"""
Tests for the E-step, the shuffle, the M-step and full estimation steps.
"""
import math
from collections import Counter, defaultdict

import numpy as np
import pytest

from traveltime.em import (
    EmConfig,
    EmDiagnostics,
    ModelState,
    SeedStream,
    assemble_window,
    e_step,
    em_iterate,
    initial_state,
    m_step,
    shuffle,
)
from traveltime.errors import ConfigError
from traveltime.evaluation import SyntheticSpec, generate
from traveltime.gamma_stats import GammaParams, gamma_log_pdf, log_kappa
from traveltime.models import WEEK_S, DecayConfig, Observation, observations_from_trajectories, prior_table
from traveltime.streaming import WorkerPool

from tests.conftest import MONDAY


@pytest.fixture()
def cfg():
    return EmConfig(num_samples=200, num_iterations=3, shards=4)


@pytest.fixture()
def state():
    return ModelState(
        time_index=MONDAY,
        params={0: GammaParams(2.0, 10.0), 1: GammaParams(2.0, 20.0), 2: GammaParams(2.0, 30.0), 3: GammaParams(4.0, 5.0)},
    )


@pytest.fixture()
def observations():
    return [
        (Observation("a", (0, 1), (1.0, 0.5), 45.0, MONDAY - 100.0), 1.0),
        (Observation("b", (1, 2), (0.8, 1.0), 70.0, MONDAY - 50.0), 0.5),
        (Observation("c", (3,), (0.4,), 9.0, MONDAY - 10.0), 0.8),
    ]


def test_config_ranges():
    with pytest.raises(ConfigError) as e:
        EmConfig(num_samples=0)
    assert e.value.field == "em.num_samples"
    with pytest.raises(ConfigError):
        EmConfig(time_step_s=1.0)


def test_seed_stream_is_keyed():
    seeds = SeedStream(7)
    a = seeds.generator("obs", 1200.0, 0).random(3)

    np.testing.assert_array_equal(a, seeds.generator("obs", 1200.0, 0).random(3))
    assert not np.array_equal(a, seeds.generator("obs", 1200.0, 1).random(3))
    assert not np.array_equal(a, seeds.generator("other", 1200.0, 0).random(3))
    with pytest.raises(ConfigError):
        SeedStream(-1)


def test_e_step_weights_sum_to_decay_weight(observations, state, cfg):
    samples = e_step(observations, state, cfg, SeedStream(0))

    first_link = {obs.id: obs.links[0] for obs, _ in observations}
    per_obs = defaultdict(float)
    for s in samples:
        if s.link == first_link[s.observation_id]:
            per_obs[s.observation_id] += s.weight
    assert per_obs["a"] == pytest.approx(1.0)
    assert per_obs["b"] == pytest.approx(0.5)
    assert per_obs["c"] == pytest.approx(0.8)
    assert Counter(s.observation_id for s in samples) == {"a": 400, "b": 400, "c": 200}


def test_e_step_samples_satisfy_constraint(observations, state, cfg):
    samples = e_step(observations, state, cfg, SeedStream(0))
    totals = defaultdict(float)
    by_obs = {obs.id: obs for obs, _ in observations}
    for s in samples:
        obs = by_obs[s.observation_id]
        totals[(s.observation_id, s.sample_index)] += obs.weights[s.link] * s.value_s

    for (obs_id, _), total in totals.items():
        assert total == pytest.approx(by_obs[obs_id].duration_s, rel=1e-9)


def test_single_link_observation_gets_whole_duration(observations, state, cfg):
    samples = [s for s in e_step(observations, state, cfg, SeedStream(0)) if s.observation_id == "c"]

    assert {s.link for s in samples} == {3}
    assert all(s.value_s == pytest.approx(22.5) for s in samples)


def test_symmetric_links_split_duration_evenly(cfg):
    """Two identical links share the observed duration equally on average"""
    obs = Observation("sym", (0, 1), (1.0, 1.0), 60.0, 0.0)
    state = ModelState(time_index=0.0, params={0: GammaParams(3.0, 10.0), 1: GammaParams(3.0, 10.0)})

    samples = e_step([(obs, 1.0)], state, EmConfig(num_samples=5000), SeedStream(3))
    grouped = shuffle(samples)
    means = [np.average([s.value_s for s in grouped[l]], weights=[s.weight for s in grouped[l]]) for l in (0, 1)]

    assert means == pytest.approx([30.0, 30.0], rel=0.03)


def test_e_step_seeds_missing_links_from_prior(net):
    obs = Observation("o", (0, 1), (1.0, 1.0), 40.0, 0.0)
    prior = prior_table(net)

    assert e_step([(obs, 1.0)], initial_state(), EmConfig(num_samples=10), SeedStream(0)) == []
    samples = e_step([(obs, 1.0)], initial_state(), EmConfig(num_samples=10), SeedStream(0), prior=prior)
    assert len(samples) == 20


def test_shuffle_partitions_by_link(observations, state, cfg):
    samples = e_step(observations, state, cfg, SeedStream(0))
    grouped = shuffle(samples)

    assert sorted(grouped) == [0, 1, 2, 3]
    assert sum(len(v) for v in grouped.values()) == len(samples)
    assert all(s.link == link for link, items in grouped.items() for s in items)


def test_m_step_leaves_untouched_links_alone(observations, state, cfg, net):
    grouped = shuffle(e_step(observations, state, cfg, SeedStream(0)))
    del grouped[3]

    new = m_step(grouped, state, prior_table(net), cfg, time_index=MONDAY + 1200.0)

    assert new.time_index == MONDAY + 1200.0
    assert new.params[3] is state.params[3]
    assert new.params[0] != state.params[0]
    assert state.params[0] == GammaParams(2.0, 10.0)


def test_m_step_keeps_previous_on_refused_fit(state, cfg):
    """Without a prior a link with a single sample cannot be refitted"""
    obs = Observation("one", (0, 1), (1.0, 1.0), 50.0, 0.0)
    grouped = shuffle(e_step([(obs, 1.0)], state, EmConfig(num_samples=1), SeedStream(0)))

    new = m_step(grouped, state, None, cfg)

    assert new.params[0] == state.params[0]
    assert new.params[1] == state.params[1]


def test_em_iterate_empty_input(state, cfg):
    new = em_iterate([], state, None, cfg, SeedStream(0), time_index=MONDAY + 1200.0)

    assert new.time_index == MONDAY + 1200.0
    assert new.params == state.params
    assert new.diagnostics == EmDiagnostics()


def test_em_iterate_diagnostics(observations, state, cfg, net):
    new = em_iterate(observations, state, prior_table(net), cfg, SeedStream(0))

    diag = new.diagnostics
    assert len(diag.iterations) == cfg.num_iterations
    assert diag.final.n_observations == 3
    assert diag.final.skipped == 0
    assert diag.final.links_updated == 4
    assert diag.final.n_samples == cfg.num_samples * 5
    assert all(np.isfinite(diag.q_values))


def test_em_iterate_independent_of_workers(observations, state, cfg, net):
    prior = prior_table(net)
    inline = em_iterate(observations, state, prior, cfg, SeedStream(11))
    with WorkerPool(3, "thread") as pool:
        pooled = em_iterate(list(reversed(observations)), state, prior, cfg, SeedStream(11), map_fn=pool.map)

    assert inline.params == pooled.params
    assert inline.diagnostics == pooled.diagnostics


class _History:
    def __init__(self, observations):
        self.observations = observations

    def query_range(self, start, end):
        return [o for o in self.observations if start <= o.time <= end]


def test_assemble_window_weights_and_lookback():
    t = MONDAY + 12 * 3600.0
    cfg = EmConfig(day_window_s=3600.0, weeks_lookback=1)
    decay = DecayConfig(day_window_s=3600.0, week_window_count=1)
    now = Observation("now", (0,), (1.0,), 10.0, t - 600.0)
    stale = Observation("stale", (0,), (1.0,), 10.0, t - 7200.0)
    last_week = Observation("week", (0,), (1.0,), 10.0, t - WEEK_S - 60.0)
    two_weeks = Observation("two", (0,), (1.0,), 10.0, t - 2 * WEEK_S)

    window = dict((o.id, w) for o, w in assemble_window([now, stale], _History([now, last_week, two_weeks]), t, cfg, decay))

    assert set(window) == {"now", "week"}
    assert window["now"] == pytest.approx(0.2 ** (600.0 / 3600.0))
    assert window["week"] == pytest.approx(0.2 * 0.2 ** (60.0 / 3600.0))


@pytest.mark.slow
def test_em_recovers_synthetic_link_means():
    """Per-link means are recovered from about 10^4 sparse path durations on 100 links"""
    data = generate(SyntheticSpec(n_links=100, trips_per_hour=10_000.0, hours=1.0, links_per_trip_min=1, links_per_trip_max=4, seed=5))
    net = data.network
    observations = [(o, 1.0) for o in observations_from_trajectories(data.trajectories, net)]
    assert len(observations) > 9_000
    cfg = EmConfig(num_samples=50, num_iterations=5, shards=4)

    state = em_iterate(observations, initial_state(), prior_table(net), cfg, SeedStream(0))

    traversals = Counter(l for o, _ in observations for l in o.links)
    checked = 0
    for idx, link in enumerate(net.links):
        if traversals[idx] < 30:
            continue
        truth = data.ground_truth[link.id].mean
        assert state.params[idx].mean == pytest.approx(truth, rel=0.10), link.id
        checked += 1
    assert checked >= 50


def test_unweighted_sampling_mode_keeps_weight_sums(observations, state):
    cfg = EmConfig(num_samples=50, importance_correction=False)
    samples = [s for s in e_step(observations, state, cfg, SeedStream(0)) if s.link == 1 and s.observation_id == "a"]

    assert sum(s.weight for s in samples) == pytest.approx(1.0)


def test_q_value_matches_hand_computed_sum(state, net):
    """Q adds the weighted Gamma log-densities and subtracts decay * log kappa, both under the refitted parameters"""
    observations = [
        (Observation("a", (0, 1), (1.0, 0.5), 45.0, MONDAY - 100.0), 1.0),
        (Observation("b", (1, 2), (0.8, 1.0), 70.0, MONDAY - 50.0), 0.5),
    ]
    cfg = EmConfig(num_samples=50, num_iterations=1, shards=3)
    new = em_iterate(observations, state, prior_table(net), cfg, SeedStream(4))

    per_draw = defaultdict(lambda: [0.0, 0.0])
    for s in e_step(observations, state, cfg, SeedStream(4)):
        entry = per_draw[(s.observation_id, s.sample_index)]
        entry[0] = s.weight
        entry[1] += gamma_log_pdf(s.value_s, new.params[s.link])
    sample_term = sum(w * h for w, h in per_draw.values())
    normalizer = sum(
        decay * log_kappa([GammaParams(new.params[l].k, a * new.params[l].theta / o.duration_s) for l, a in zip(o.links, o.alpha)])
        for o, decay in observations
    )

    final = new.diagnostics.final
    assert final.sample_log_likelihood == pytest.approx(sample_term, rel=1e-9)
    assert final.log_normalizer == pytest.approx(normalizer, rel=1e-9)
    assert final.q_value == pytest.approx(sample_term - normalizer, rel=1e-9)
    assert final.observed_log_likelihood == pytest.approx(normalizer - math.log(45.0) - 0.5 * math.log(70.0), rel=1e-9)
    assert final.q_stderr > 0
    assert final.unscored == 0


def test_q_is_non_decreasing_on_single_link_network():
    """With one link per observation the allocation is fixed and Q cannot drop"""
    rng = np.random.default_rng(2)
    observations = [
        (Observation(f"o{i}", (0,), (float(a),), float(d), MONDAY - i), 1.0)
        for i, (a, d) in enumerate(zip(rng.uniform(0.2, 1.0, 40), rng.gamma(4.0, 10.0, 40)))
    ]
    state = ModelState(time_index=MONDAY, params={0: GammaParams(1.0, 100.0)})

    new = em_iterate(observations, state, {0: (60.0, 40.0)}, EmConfig(num_samples=10, num_iterations=5), SeedStream(0))

    iterations = new.diagnostics.iterations
    assert len(iterations) == 5
    for before, after in zip(iterations, iterations[1:]):
        assert after.q_value >= before.q_value - 3 * math.hypot(before.q_stderr, after.q_stderr) - 1e-9 * abs(before.q_value)
        assert after.observed_log_likelihood >= before.observed_log_likelihood - 1e-9 * abs(before.observed_log_likelihood)


def test_one_round_equals_composed_steps(observations, state, net):
    """em_iterate with one iteration is m_step(shuffle(e_step(...)))"""
    cfg = EmConfig(num_samples=40, num_iterations=1, shards=3)
    prior = prior_table(net)

    composed = m_step(shuffle(e_step(observations, state, cfg, SeedStream(9), prior=prior)), state, prior, cfg)
    direct = em_iterate(list(reversed(observations)), state, prior, cfg, SeedStream(9))

    assert composed.params == direct.params
    assert composed.n_effective == direct.n_effective


def test_duplicate_observation_ids_are_all_counted(state, net):
    observations = [
        (Observation("dup", (0, 1), (1.0, 1.0), 50.0, MONDAY - 100.0), 1.0),
        (Observation("dup", (2, 3), (1.0, 1.0), 60.0, MONDAY - 50.0), 1.0),
    ]
    cfg = EmConfig(num_samples=20, num_iterations=1, shards=4)

    new = em_iterate(observations, state, prior_table(net), cfg, SeedStream(0))

    final = new.diagnostics.final
    assert final.n_observations == 2
    assert final.n_samples == 20 * 4
    assert final.links_updated == 4
    assert all(new.params[l] != state.params[l] for l in range(4))


def _rejection_allocations(alpha, d, params, n_accept, rng, band):
    alpha = np.asarray(alpha, dtype=float)
    k = np.array([p.k for p in params])
    theta = np.array([p.theta for p in params])
    kept, total = [], 0
    while total < n_accept:
        x = rng.gamma(k, theta, size=(1_000_000, k.size))
        hit = x[np.abs(x @ alpha - d) < band * d]
        kept.append(hit * (d / (hit @ alpha))[:, None])
        total += len(hit)
    return np.concatenate(kept)[:n_accept]


@pytest.mark.slow
def test_three_link_allocation_means_match_rejection(state):
    """Weighted E-step allocations on links (2,10), (2,20), (2,30) match accepted Gamma draws within 2%"""
    alpha, d = (1.0, 1.0, 1.0), 100.0
    params = [state.params[l] for l in (0, 1, 2)]
    # Copies of one observation under distinct ids get independent draws.
    observations = [(Observation(f"t{i}", (0, 1, 2), alpha, d, MONDAY - i), 1.0) for i in range(200)]

    grouped = shuffle(e_step(observations, state, EmConfig(num_samples=500), SeedStream(5)))
    means = [np.average([s.value_s for s in grouped[l]], weights=[s.weight for s in grouped[l]]) for l in (0, 1, 2)]
    oracle = _rejection_allocations(alpha, d, params, 50_000, np.random.default_rng(6), band=1e-3).mean(axis=0)

    assert means == pytest.approx(oracle.tolist(), rel=0.02)
