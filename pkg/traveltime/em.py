"""
Online expectation-maximization over decay-weighted observations.

One estimation step runs `num_iterations` rounds of

- E-step: for every observation, draw `num_samples` points of the hyperplane
  sum_l alpha_l x_l = duration under the current link Gammas and attach
  self-normalized importance weights scaled by the observation's decay weight,
- shuffle: group the weighted samples by link,
- M-step: refit every touched link by weighted maximum likelihood on its
  samples plus a few prior pseudo-samples.

All functions are pure: they take a `ModelState` and return a new one. The
parallel parts take a `map_fn` so that the streaming runtime can hand them a
worker pool; results never depend on the number of workers.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from operator import attrgetter
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Protocol, Sequence, Tuple

import numpy as np
from scipy import special

from traveltime.errors import (
    ConfigError,
    DegenerateSampleError,
    FitError,
    FutureObservationError,
    MissingParametersError,
    TravelTimeError,
)
from traveltime.gamma_stats import (
    GammaParams,
    SeriesConfig,
    effective_sample_size,
    fit_gamma_weighted,
    gamma_logpdf_array,
    importance_log_weights,
    joint_log_likelihood,
    log_kappa,
    prior_pseudo_samples,
    sample_conditional_batch,
)
from traveltime.models import WEEK_S, DecayConfig, Observation, decay_weight, prior_gamma
from traveltime.streaming import stable_hash

logger = logging.getLogger(__name__)

MapFn = Callable[[Callable[[Any], Any], Iterable[Any]], Iterable[Any]]
PriorMoments = Mapping[int, Tuple[float, float]]


@dataclass(frozen=True)
class EmConfig:
    """Knobs of one estimation step.

    `time_step_s` is how often a new estimate is produced; `day_window_s`
    and `weeks_lookback` define which past observations take part in it.
    With `importance_correction` off, sample weights are the plain joint
    Gamma likelihoods of the allocations.
    """

    num_samples: int = 100
    num_iterations: int = 5
    weeks_lookback: int = 10
    day_window_s: float = 7200.0
    time_step_s: float = 1200.0
    prior_strength: float = 1.0
    prior_nodes: int = 12
    min_effective_samples: float = 3.0
    weight_floor: float = 1e-3
    shards: int = 8
    importance_correction: bool = True
    series: SeriesConfig = field(default_factory=SeriesConfig)

    def __post_init__(self) -> None:
        checks = [
            ("num_samples", 1 <= self.num_samples <= 10_000, "must lie in [1, 10000]"),
            ("num_iterations", 1 <= self.num_iterations <= 100, "must lie in [1, 100]"),
            ("weeks_lookback", 0 <= self.weeks_lookback <= 52, "must lie in [0, 52]"),
            ("day_window_s", 60.0 <= self.day_window_s <= 86_400.0, "must lie in [60, 86400]"),
            ("time_step_s", 5.0 <= self.time_step_s <= 3600.0, "must lie in [5, 3600]"),
            ("prior_strength", self.prior_strength >= 0.0, "must be >= 0"),
            ("prior_nodes", 2 <= self.prior_nodes <= 64, "must lie in [2, 64]"),
            ("min_effective_samples", self.min_effective_samples >= 0.0, "must be >= 0"),
            ("weight_floor", 0.0 <= self.weight_floor < 1.0, "must lie in [0, 1)"),
            ("shards", self.shards >= 1, "must be >= 1"),
        ]
        for name, ok, message in checks:
            if not ok:
                raise ConfigError(message, f"em.{name}")


@dataclass(frozen=True)
class IterationDiagnostics:
    """Diagnostics of one E/M round, scored under the refitted parameters.

    `q_value` = `sample_log_likelihood` - `log_normalizer`; observations
    whose normalizer could not be evaluated are counted in `unscored` and
    left out of both terms.
    """

    q_value: float = 0.0
    q_stderr: float = 0.0
    sample_log_likelihood: float = 0.0
    log_normalizer: float = 0.0
    observed_log_likelihood: float = 0.0
    n_observations: int = 0
    n_samples: int = 0
    skipped: int = 0
    unscored: int = 0
    fit_failures: int = 0
    links_updated: int = 0


@dataclass(frozen=True)
class EmDiagnostics:
    """Per-iteration diagnostics of one estimation step."""

    iterations: Tuple[IterationDiagnostics, ...] = ()
    seeded_links: int = 0

    @property
    def q_values(self) -> List[float]:
        return [it.q_value for it in self.iterations]

    @property
    def final(self) -> IterationDiagnostics:
        return self.iterations[-1] if self.iterations else IterationDiagnostics()


@dataclass(frozen=True)
class ModelState:
    """Per-link Gamma parameters valid at `time_index`.

    Links absent from `params` have no estimate yet. States are never
    mutated; entries of links a step did not touch are carried over as the
    very same objects.
    """

    time_index: float
    params: Mapping[int, GammaParams] = field(default_factory=dict)
    n_effective: Mapping[int, float] = field(default_factory=dict)
    diagnostics: Optional[EmDiagnostics] = None

    def get(self, link: int) -> Optional[GammaParams]:
        return self.params.get(link)


@dataclass(frozen=True)
class WeightedSample:
    link: int
    value_s: float
    weight: float
    observation_id: str = ""
    sample_index: int = 0


class SeedStream:
    """Reproducible random generators keyed by observation, step and iteration.

    The generator an observation gets does not depend on which worker draws
    it, nor on the order observations are processed in.
    """

    def __init__(self, seed: int) -> None:
        if seed < 0:
            raise ConfigError("must be >= 0", "seed")
        self.seed = int(seed)

    def generator(self, observation_id: str, step: float, iteration: int) -> np.random.Generator:
        key = stable_hash(observation_id)
        step_key = int(math.floor(step)) & 0xFFFFFFFFFFFFFFFF
        return np.random.default_rng(np.random.SeedSequence([self.seed, key, step_key, iteration]))


class HistoryLookup(Protocol):
    def query_range(self, start: float, end: float) -> Iterable[Observation]:
        ...


def _canonical(observations: Iterable[Tuple[Observation, float]]) -> List[Tuple[Observation, float]]:
    """Processing order of a step: by time, then id; ties keep input order."""
    return sorted(observations, key=lambda ow: (ow[0].time, ow[0].id))


# --- E-step --------------------------------------------------------------------

@dataclass
class _Draws:
    """Weighted samples of the observation at `position`: z has shape (U, n).

    `weights` sum to the observation's decay weight.
    """

    position: int
    observation_id: str
    links: Tuple[int, ...]
    alpha: Tuple[float, ...]
    duration_s: float
    z: np.ndarray
    weights: np.ndarray


@dataclass
class _EShardResult:
    draws: List[_Draws] = field(default_factory=list)
    skipped: int = 0


@dataclass(frozen=True)
class _EShardTask:
    observations: Tuple[Tuple[int, Observation, float], ...]
    params: Mapping[int, GammaParams]
    cfg: EmConfig
    seeds: SeedStream
    step: float
    iteration: int


def _draw_observation(
    position: int,
    obs: Observation,
    decay: float,
    params: Mapping[int, GammaParams],
    cfg: EmConfig,
    rng: np.random.Generator,
) -> _Draws:
    comps = []
    for link in obs.links:
        p = params.get(link)
        if p is None:
            raise MissingParametersError(link)
        comps.append(p)
    z, _ = sample_conditional_batch(obs.alpha, obs.duration_s, comps, cfg.num_samples, rng)
    if cfg.importance_correction:
        log_w = importance_log_weights(z, comps)
    else:
        log_w = joint_log_likelihood(z, comps)
    if not np.all(np.isfinite(log_w)):
        raise DegenerateSampleError(f"non-finite importance weights for observation '{obs.id}'")
    w = np.exp(log_w - special.logsumexp(log_w))
    return _Draws(position, obs.id, obs.links, obs.alpha, obs.duration_s, z, decay * w)


def _run_e_shard(task: _EShardTask) -> _EShardResult:
    out = _EShardResult()
    for position, obs, decay in task.observations:
        rng = task.seeds.generator(obs.id, task.step, task.iteration)
        try:
            out.draws.append(_draw_observation(position, obs, decay, task.params, task.cfg, rng))
        except TravelTimeError as e:
            out.skipped += 1
            logger.warning(f"Skipped observation '{obs.id}' in E-step: {e}")
    return out


def _seed_missing(
    observations: Sequence[Tuple[Observation, float]],
    params: Mapping[int, GammaParams],
    prior: Optional[PriorMoments],
) -> Dict[int, GammaParams]:
    seeded: Dict[int, GammaParams] = {}
    if prior is None:
        return seeded
    for obs, _ in observations:
        for link in obs.links:
            if link not in params and link not in seeded and link in prior:
                seeded[link] = prior_gamma(*prior[link])
    return seeded


def e_step(
    observations: Sequence[Tuple[Observation, float]],
    state: ModelState,
    cfg: EmConfig,
    seeds: SeedStream,
    prior: Optional[PriorMoments] = None,
    iteration: int = 0,
) -> List[WeightedSample]:
    """Weighted hyperplane samples for each (observation, decay weight) pair.

    The weights of one observation sum to its decay weight. Links without an
    estimate are seeded from `prior`; observations that still lack
    parameters, or whose sampling fails, are skipped and logged. Samples
    come out observation by observation in processing order (time, then id).
    """
    ordered = _canonical(observations)
    params = dict(state.params)
    params.update(_seed_missing(ordered, params, prior))
    indexed = tuple((pos, obs, w) for pos, (obs, w) in enumerate(ordered))
    result = _run_e_shard(_EShardTask(indexed, params, cfg, seeds, state.time_index, iteration))
    return [
        WeightedSample(link=link, value_s=float(d.z[u, j]), weight=float(d.weights[u]), observation_id=d.observation_id, sample_index=u)
        for d in result.draws
        for u in range(d.z.shape[0])
        for j, link in enumerate(d.links)
    ]


def shuffle(samples: Iterable[WeightedSample]) -> Dict[int, List[WeightedSample]]:
    """Group samples by link, keeping their relative order."""
    grouped: Dict[int, List[WeightedSample]] = {}
    for s in samples:
        grouped.setdefault(s.link, []).append(s)
    return grouped


def _group_draws(results: Sequence[_EShardResult]) -> Dict[int, Tuple[np.ndarray, np.ndarray]]:
    """Array form of `shuffle` over the draws of all shards, in processing order."""
    values: Dict[int, List[np.ndarray]] = {}
    weights: Dict[int, List[np.ndarray]] = {}
    for d in sorted((d for r in results for d in r.draws), key=attrgetter("position")):
        for j, link in enumerate(d.links):
            values.setdefault(link, []).append(d.z[:, j])
            weights.setdefault(link, []).append(d.weights)
    return {link: (np.concatenate(values[link]), np.concatenate(weights[link])) for link in values}


# --- M-step --------------------------------------------------------------------

@dataclass(frozen=True)
class _MShardTask:
    groups: Mapping[int, Tuple[np.ndarray, np.ndarray]]
    prior: Mapping[int, Tuple[float, float]]
    previous: Mapping[int, GammaParams]
    cfg: EmConfig


@dataclass
class _LinkFit:
    params: Optional[GammaParams]
    n_effective: float


def _fit_link(
    link: int,
    values: np.ndarray,
    weights: np.ndarray,
    prior: Optional[Tuple[float, float]],
    cfg: EmConfig,
) -> _LinkFit:
    ess = effective_sample_size(weights) if values.size else 0.0
    x, w = values, weights
    min_ess = cfg.min_effective_samples
    if prior is not None and cfg.prior_strength > 0:
        px, pw = prior_pseudo_samples(prior[0], prior[1], cfg.prior_nodes)
        x = np.concatenate([values, px])
        w = np.concatenate([weights, cfg.prior_strength * pw])
        # The prior keeps the fit well posed; only the data are checked.
        if values.size and ess < min_ess:
            logger.debug(f"Link {link}: effective sample size {ess:.3g} is low, prior dominates")
        min_ess = 0.0
    try:
        fitted = fit_gamma_weighted(x, w, min_effective_samples=min_ess)
    except (DegenerateSampleError, FitError, ValueError) as e:
        logger.warning(f"Link {link}: keeping previous parameters, fit refused: {e}")
        return _LinkFit(params=None, n_effective=ess)
    return _LinkFit(params=fitted, n_effective=ess)


def _run_m_shard(task: _MShardTask) -> Dict[int, _LinkFit]:
    return {
        link: _fit_link(link, values, weights, task.prior.get(link), task.cfg)
        for link, (values, weights) in sorted(task.groups.items())
    }


def _sample_arrays(samples: Sequence[WeightedSample]) -> Tuple[np.ndarray, np.ndarray]:
    values = np.fromiter((s.value_s for s in samples), dtype=float, count=len(samples))
    weights = np.fromiter((s.weight for s in samples), dtype=float, count=len(samples))
    return values, weights


def _merge_fits(
    state: ModelState,
    fits: Mapping[int, _LinkFit],
    time_index: float,
    diagnostics: Optional[EmDiagnostics],
) -> ModelState:
    params = dict(state.params)
    n_eff = dict(state.n_effective)
    for link, fit in fits.items():
        if fit.params is not None:
            params[link] = fit.params
        n_eff[link] = fit.n_effective
    return ModelState(time_index=time_index, params=params, n_effective=n_eff, diagnostics=diagnostics)


def m_step(
    grouped: Mapping[int, Sequence[WeightedSample]],
    state: ModelState,
    prior: Optional[PriorMoments],
    cfg: EmConfig,
    time_index: Optional[float] = None,
) -> ModelState:
    """Refit each link of `grouped` by weighted MLE with prior pseudo-samples.

    Links not in `grouped` keep their parameters. A link whose fit is refused
    keeps its previous parameters. Samples are used in the order given.
    """
    prior = prior or {}
    groups = {link: _sample_arrays(samples) for link, samples in grouped.items()}
    fits = _run_m_shard(_MShardTask(groups, {l: prior[l] for l in groups if l in prior}, state.params, cfg))
    return _merge_fits(state, fits, state.time_index if time_index is None else time_index, state.diagnostics)


# --- scoring -------------------------------------------------------------------

@dataclass(frozen=True)
class _QShardTask:
    draws: Tuple[_Draws, ...]
    params: Mapping[int, GammaParams]
    series: SeriesConfig


@dataclass
class _QShardResult:
    sample_log_likelihood: float = 0.0
    log_normalizer: float = 0.0
    observed_log_likelihood: float = 0.0
    variance: float = 0.0
    unscored: int = 0


def _score_draws(task: _QShardTask) -> _QShardResult:
    out = _QShardResult()
    for d in task.draws:
        try:
            comps = []
            for link in d.links:
                p = task.params.get(link)
                if p is None:
                    raise MissingParametersError(link)
                comps.append(p)
            scaled = [GammaParams(p.k, a * p.theta / d.duration_s) for p, a in zip(comps, d.alpha)]
            log_k = log_kappa(scaled, task.series)
        except TravelTimeError as e:
            out.unscored += 1
            logger.warning(f"Observation '{d.observation_id}' left out of Q: {e}")
            continue
        k = np.array([p.k for p in comps])
        theta = np.array([p.theta for p in comps])
        h = np.sum(gamma_logpdf_array(d.z, k, theta), axis=1)
        decay = float(d.weights.sum())
        q = float(np.dot(d.weights, h))
        out.sample_log_likelihood += q
        out.log_normalizer += decay * log_k
        # Density of alpha^T X at d is kappa / d.
        out.observed_log_likelihood += decay * (log_k - math.log(d.duration_s))
        if decay > 0:
            w = d.weights / decay
            out.variance += decay * decay * float(np.dot(w * w, (h - q / decay) ** 2))
    return out


def _links_of(draws: Iterable[_Draws], params: Mapping[int, GammaParams]) -> Dict[int, GammaParams]:
    return {link: params[link] for d in draws for link in d.links if link in params}


# --- one estimation step -----------------------------------------------------

def em_iterate(
    observations: Sequence[Tuple[Observation, float]],
    state: ModelState,
    prior: Optional[PriorMoments],
    cfg: EmConfig,
    seeds: SeedStream,
    time_index: Optional[float] = None,
    map_fn: MapFn = map,
) -> ModelState:
    """Run `cfg.num_iterations` E/M rounds on decay-weighted observations.

    Work is split into `cfg.shards` parts keyed by observation id (E-step
    and scoring) and link (M-step), and each part is handed to `map_fn`.
    The resulting state is identical for any `map_fn` that preserves order.
    One round equals `m_step(shuffle(e_step(...)))`.

    After each round the samples are scored under the refitted parameters:

        Q = sum_samples w * sum_l log f_Gamma(x_l)
            - sum_observations decay * log kappa(k, alpha * theta / d)

    i.e. the decay-weighted expected log-density of the allocations under
    the law conditioned on alpha^T x = d, up to parameter-free terms. The
    round also records the Monte Carlo standard error of Q and the
    observed-data log-likelihood sum decay * log f(d).
    """
    time_index = state.time_index if time_index is None else time_index
    if not observations:
        return replace(state, time_index=time_index, diagnostics=EmDiagnostics())

    ordered = _canonical(observations)
    seeded = _seed_missing(ordered, state.params, prior)
    params: Dict[int, GammaParams] = dict(state.params)
    params.update(seeded)
    current = replace(state, params=params)

    obs_shards: List[List[Tuple[int, Observation, float]]] = [[] for _ in range(cfg.shards)]
    for pos, (obs, w) in enumerate(ordered):
        obs_shards[stable_hash(obs.id) % cfg.shards].append((pos, obs, w))

    history: List[IterationDiagnostics] = []
    for iteration in range(cfg.num_iterations):
        tasks = [
            _EShardTask(tuple(shard), current.params, cfg, seeds, time_index, iteration)
            for shard in obs_shards
            if shard
        ]
        e_results = list(map_fn(_run_e_shard, tasks))
        groups = _group_draws(e_results)

        link_shards: List[Dict[int, Tuple[np.ndarray, np.ndarray]]] = [{} for _ in range(cfg.shards)]
        for link, arrays in groups.items():
            link_shards[stable_hash(str(link)) % cfg.shards][link] = arrays
        m_tasks = [
            _MShardTask(
                shard,
                {l: prior[l] for l in shard if prior is not None and l in prior},
                {l: current.params[l] for l in shard if l in current.params},
                cfg,
            )
            for shard in link_shards
            if shard
        ]
        fits: Dict[int, _LinkFit] = {}
        for part in map_fn(_run_m_shard, m_tasks):
            fits.update(part)
        current = _merge_fits(current, fits, time_index, None)

        q_tasks = [_QShardTask(tuple(r.draws), _links_of(r.draws, current.params), cfg.series) for r in e_results if r.draws]
        scores = list(map_fn(_score_draws, q_tasks))
        sample_ll = math.fsum(s.sample_log_likelihood for s in scores)
        log_norm = math.fsum(s.log_normalizer for s in scores)
        skipped = sum(r.skipped for r in e_results)
        history.append(
            IterationDiagnostics(
                q_value=sample_ll - log_norm,
                q_stderr=math.sqrt(math.fsum(s.variance for s in scores)),
                sample_log_likelihood=sample_ll,
                log_normalizer=log_norm,
                observed_log_likelihood=math.fsum(s.observed_log_likelihood for s in scores),
                n_observations=len(ordered) - skipped,
                n_samples=int(sum(v.size for v, _ in groups.values())),
                skipped=skipped,
                unscored=sum(s.unscored for s in scores),
                fit_failures=sum(1 for f in fits.values() if f.params is None),
                links_updated=sum(1 for f in fits.values() if f.params is not None),
            )
        )

    diagnostics = EmDiagnostics(iterations=tuple(history), seeded_links=len(seeded))
    last = diagnostics.final
    logger.info(
        f"EM step at t={time_index:.0f}: {last.n_observations} observations, "
        f"{last.links_updated} links updated, {last.skipped} skipped, Q={last.q_value:.6g} ± {last.q_stderr:.2g}"
    )
    return replace(current, diagnostics=diagnostics)


def assemble_window(
    current_batch: Iterable[Observation],
    history: Optional[HistoryLookup],
    t_current: float,
    cfg: EmConfig,
    decay: DecayConfig,
) -> List[Tuple[Observation, float]]:
    """Decay-weighted observations taking part in the estimate at `t_current`.

    The current batch contributes observations from the last `day_window_s`
    seconds; the history contributes the same time-of-day window of each of
    the past `weeks_lookback` weeks. Observations are deduplicated by id,
    and those whose weight falls below `cfg.weight_floor` are dropped.
    """
    seen = set()
    out: List[Tuple[Observation, float]] = []

    def consider(obs: Observation) -> None:
        if obs.id in seen:
            return
        try:
            w = decay_weight(obs.time, t_current, decay)
        except FutureObservationError:
            return
        if w < cfg.weight_floor:
            return
        seen.add(obs.id)
        out.append((obs, w))

    for obs in current_batch:
        if t_current - cfg.day_window_s <= obs.time <= t_current:
            consider(obs)
    if history is not None:
        for week in range(cfg.weeks_lookback + 1):
            anchor = t_current - week * WEEK_S
            for obs in history.query_range(anchor - cfg.day_window_s, anchor):
                consider(obs)
    return out


def initial_state(time_index: float = 0.0) -> ModelState:
    return ModelState(time_index=time_index)


__all__ = [
    "EmConfig",
    "EmDiagnostics",
    "IterationDiagnostics",
    "ModelState",
    "SeedStream",
    "WeightedSample",
    "assemble_window",
    "e_step",
    "em_iterate",
    "initial_state",
    "m_step",
    "shuffle",
]
