"""
Domain types for road networks, trajectory measurements and observations.

This module also holds the three small rules that turn raw measurements into
model inputs: the path activation vector, the exponential decay weighting of
older observations, and the per-link prior moments.
"""
from __future__ import annotations

import logging
import math
import operator
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple

from traveltime.errors import (
    ConfigError,
    DegenerateObservationError,
    FutureObservationError,
    InvalidRecordError,
    TravelTimeError,
    UnknownLinkError,
)
from traveltime.gamma_stats import GammaParams

logger = logging.getLogger(__name__)

DAY_S = 86_400.0
WEEK_S = 7 * DAY_S
# Observations whose activation mass is below this are rejected.
MIN_ALPHA_MASS = 1e-6
# End links of a multi-link path covered below this fraction are dropped.
MIN_COMPONENT_ALPHA = 1e-2


def _positive_finite(value: float) -> bool:
    return math.isfinite(value) and value > 0


@dataclass(frozen=True)
class Link:
    """A directed road segment."""

    id: str
    from_node: str
    to_node: str
    length_m: float
    speed_limit_mps: float

    def __post_init__(self) -> None:
        if not _positive_finite(self.length_m):
            raise InvalidRecordError(f"link '{self.id}': length_m must be > 0, got {self.length_m}")
        if not _positive_finite(self.speed_limit_mps):
            raise InvalidRecordError(f"link '{self.id}': speed_limit_mps must be > 0, got {self.speed_limit_mps}")


@dataclass(frozen=True)
class RoadNetwork:
    """Links of the road network and their dense index space.

    Build it with `RoadNetwork.from_links`; indices follow the order of the links.
    """

    links: Tuple[Link, ...]
    link_index: Mapping[str, int]

    @classmethod
    def from_links(cls, links: Iterable[Link]) -> "RoadNetwork":
        links = tuple(links)
        index: Dict[str, int] = {}
        for i, link in enumerate(links):
            if link.id in index:
                raise InvalidRecordError(f"duplicate link id '{link.id}'")
            index[link.id] = i
        return cls(links=links, link_index=MappingProxyType(index))

    def __len__(self) -> int:
        return len(self.links)

    def __reduce__(self):
        # MappingProxyType does not pickle; rebuild from the links instead.
        return (RoadNetwork.from_links, (self.links,))

    def link(self, link_id: str) -> Link:
        try:
            return self.links[self.link_index[link_id]]
        except KeyError:
            raise UnknownLinkError(link_id) from None


@dataclass(frozen=True)
class TrajectoryMeasurement:
    """A map-matched piece of trajectory between two GPS fixes.

    `split` optionally tags the record as "train" or "test" data.
    """

    id: str
    start_time: float
    duration_s: float
    path: Tuple[str, ...]
    offset_start_m: float
    offset_end_m: float
    split: str = ""

    def __post_init__(self) -> None:
        if not self.path:
            raise InvalidRecordError(f"trajectory '{self.id}': empty path")
        if not _positive_finite(self.duration_s):
            raise InvalidRecordError(f"trajectory '{self.id}': duration_s must be > 0, got {self.duration_s}")
        if not math.isfinite(self.start_time):
            raise InvalidRecordError(f"trajectory '{self.id}': start_time must be finite")
        object.__setattr__(self, "path", tuple(self.path))


@dataclass(frozen=True)
class Observation:
    """Sparse path activation vector plus the observed duration.

    `links` and `alpha` are parallel tuples: link index and the covered
    fraction α(l) in (0, 1]. Links not listed have α = 0.
    """

    id: str
    links: Tuple[int, ...]
    alpha: Tuple[float, ...]
    duration_s: float
    time: float

    def __post_init__(self) -> None:
        if len(self.links) != len(self.alpha):
            raise InvalidRecordError(f"observation '{self.id}': links and alpha differ in length")
        if not self.links:
            raise InvalidRecordError(f"observation '{self.id}': no links")
        if len(set(self.links)) != len(self.links):
            raise InvalidRecordError(f"observation '{self.id}': repeated link index")
        for a in self.alpha:
            if not (0.0 < a <= 1.0):
                raise InvalidRecordError(f"observation '{self.id}': alpha {a} outside (0, 1]")
        if not _positive_finite(self.duration_s):
            raise InvalidRecordError(f"observation '{self.id}': duration_s must be > 0")

    @property
    def weights(self) -> Dict[int, float]:
        return dict(zip(self.links, self.alpha))


@dataclass(frozen=True)
class DecayConfig:
    """Windows of the exponential decay weighting.

    The weight reaches `terminal_weight` at the edge of each window:
    `day_window_s` seconds of same-day age, `week_window_count` whole weeks.
    """

    day_window_s: float = 7200.0
    week_window_count: int = 10
    terminal_weight: float = 0.2
    tz_offset_s: float = 0.0

    def __post_init__(self) -> None:
        if not _positive_finite(self.day_window_s):
            raise ConfigError("must be > 0", "decay.day_window_s")
        if self.week_window_count < 1:
            raise ConfigError("must be >= 1", "decay.week_window_count")
        if not (0.0 < self.terminal_weight < 1.0):
            raise ConfigError("must lie in (0, 1)", "decay.terminal_weight")


@dataclass(frozen=True)
class PriorConfig:
    speed_fraction: float = 0.7
    min_stddev_s: float = 60.0
    stddev_fraction: float = 0.5

    def __post_init__(self) -> None:
        if not (0.0 < self.speed_fraction <= 1.0):
            raise ConfigError("must lie in (0, 1]", "prior.speed_fraction")
        if self.min_stddev_s < 0 or self.stddev_fraction < 0:
            raise ConfigError("stddev settings must be non-negative", "prior")


def activation_vector(traj: TrajectoryMeasurement, net: RoadNetwork) -> Observation:
    """Convert a trajectory measurement into an observation.

    Travel time along a link is assumed proportional to the distance covered,
    so the first link contributes 1 - o_start/L, the last o_end/L and every
    interior link 1. A single-link path contributes (o_end - o_start)/L.
    On a multi-link path, end links covered by less than
    `MIN_COMPONENT_ALPHA` of their length are left out (at least the best
    covered link is kept).

    Raises:
        UnknownLinkError: a path link is not in the network.
        InvalidRecordError: offsets outside the link, or a repeated link.
        DegenerateObservationError: the covered span is empty.
    """
    lengths = []
    indices = []
    for link_id in traj.path:
        idx = net.link_index.get(link_id)
        if idx is None:
            raise UnknownLinkError(link_id, traj.id)
        indices.append(idx)
        lengths.append(net.links[idx].length_m)

    first_len, last_len = lengths[0], lengths[-1]
    if not (0.0 <= traj.offset_start_m <= first_len):
        raise InvalidRecordError(f"trajectory '{traj.id}': offset_start_m {traj.offset_start_m} outside [0, {first_len}]")
    if not (0.0 <= traj.offset_end_m <= last_len):
        raise InvalidRecordError(f"trajectory '{traj.id}': offset_end_m {traj.offset_end_m} outside [0, {last_len}]")
    if len(set(indices)) != len(indices):
        raise InvalidRecordError(f"trajectory '{traj.id}': path visits a link twice")

    if len(indices) == 1:
        if traj.offset_end_m <= traj.offset_start_m:
            raise DegenerateObservationError(f"trajectory '{traj.id}': single-link span has o_end <= o_start")
        alphas = [(traj.offset_end_m - traj.offset_start_m) / first_len]
    else:
        alphas = [1.0] * len(indices)
        alphas[0] = 1.0 - traj.offset_start_m / first_len
        alphas[-1] = traj.offset_end_m / last_len

    kept = [(i, min(a, 1.0)) for i, a in zip(indices, alphas) if a > 0.0]
    if len(kept) > 1:
        kept = _drop_slivers(kept, traj.id)
    if sum(a for _, a in kept) < MIN_ALPHA_MASS:
        raise DegenerateObservationError(f"trajectory '{traj.id}': activation mass below {MIN_ALPHA_MASS}")
    return Observation(
        id=traj.id,
        links=tuple(i for i, _ in kept),
        alpha=tuple(a for _, a in kept),
        duration_s=traj.duration_s,
        time=traj.start_time,
    )


def _drop_slivers(kept: List[Tuple[int, float]], traj_id: str) -> List[Tuple[int, float]]:
    thick = [(i, a) for i, a in kept if a >= MIN_COMPONENT_ALPHA]
    if not thick:
        thick = [max(kept, key=operator.itemgetter(1))]
    if len(thick) < len(kept):
        logger.debug(f"Trajectory '{traj_id}': left out {len(kept) - len(thick)} link(s) covered below {MIN_COMPONENT_ALPHA:g}")
    return thick


@dataclass
class ConversionStats:
    converted: int = 0
    rejected: int = 0
    reasons: Dict[str, int] = field(default_factory=dict)

    def reject(self, exc: Exception) -> None:
        self.rejected += 1
        name = type(exc).__name__
        self.reasons[name] = self.reasons.get(name, 0) + 1


def observations_from_trajectories(
    trajectories: Iterable[TrajectoryMeasurement],
    net: RoadNetwork,
    stats: Optional[ConversionStats] = None,
) -> Iterator[Observation]:
    """Lazily convert trajectories, skipping (and counting) rejected records."""
    stats = stats if stats is not None else ConversionStats()
    for traj in trajectories:
        try:
            obs = activation_vector(traj, net)
        except TravelTimeError as e:
            stats.reject(e)
            logger.warning(f"Rejected trajectory '{traj.id}': {e}")
            continue
        stats.converted += 1
        yield obs


def to_observations(net: RoadNetwork, traj: TrajectoryMeasurement) -> List[Observation]:
    """flat_map form of `activation_vector`: one observation, or none if rejected."""
    try:
        return [activation_vector(traj, net)]
    except TravelTimeError as e:
        logger.warning(f"Rejected trajectory '{traj.id}': {e}")
        return []


def local_day(t: float, tz_offset_s: float = 0.0) -> int:
    return int(math.floor((t + tz_offset_s) / DAY_S))


def weekday_slot(t: float, slot_s: float, tz_offset_s: float = 0.0) -> Tuple[int, int]:
    """(weekday, slot) of a timestamp in local time; Monday is 0."""
    local = t + tz_offset_s
    # 1970-01-01 was a Thursday.
    weekday = (local_day(t, tz_offset_s) + 3) % 7
    slot = int((local - math.floor(local / DAY_S) * DAY_S) // slot_s)
    return weekday, slot


def week_offset(obs_time: float, current_time: float, tz_offset_s: float = 0.0) -> int:
    """Whole weeks separating the local calendar days of two timestamps."""
    return (local_day(current_time, tz_offset_s) - local_day(obs_time, tz_offset_s)) // 7


def decay_weight(obs_time: float, current_time: float, cfg: DecayConfig) -> float:
    """Weight of an observation seen at `obs_time` when estimating at `current_time`.

    Product of a same-day age decay and a whole-week decay, each equal to
    `cfg.terminal_weight` at the edge of its window. The age is taken
    relative to the same weekday slice the observation belongs to.
    """
    if obs_time > current_time:
        raise FutureObservationError(obs_time, current_time)
    weeks = week_offset(obs_time, current_time, cfg.tz_offset_s)
    age = abs((current_time - obs_time) - weeks * WEEK_S)
    log_terminal = math.log(cfg.terminal_weight)
    log_w = log_terminal * (age / cfg.day_window_s) + log_terminal * (weeks / cfg.week_window_count)
    return math.exp(log_w)


def prior_params(link: Link, cfg: PriorConfig = PriorConfig()) -> Tuple[float, float]:
    """Prior (mean, stddev) in seconds of a link's travel time."""
    mean = link.length_m / (cfg.speed_fraction * link.speed_limit_mps)
    stddev = max(cfg.min_stddev_s, cfg.stddev_fraction * mean)
    return mean, stddev


def prior_gamma(mean_s: float, stddev_s: float) -> GammaParams:
    """Gamma distribution with the given mean and standard deviation."""
    return GammaParams(k=(mean_s / stddev_s) ** 2, theta=stddev_s ** 2 / mean_s)


def prior_table(net: RoadNetwork, cfg: PriorConfig = PriorConfig()) -> "PriorTable":
    return PriorTable(net, cfg)


class PriorTable(Mapping[int, Tuple[float, float]]):
    """Lazy link-index -> prior (mean, stddev) mapping over a network."""

    def __init__(self, net: RoadNetwork, cfg: PriorConfig = PriorConfig()) -> None:
        self._net = net
        self._cfg = cfg

    def __getitem__(self, idx: int) -> Tuple[float, float]:
        try:
            i = operator.index(idx)
        except TypeError:
            raise KeyError(idx) from None
        if not (0 <= i < len(self._net)):
            raise KeyError(idx)
        return prior_params(self._net.links[i], self._cfg)

    def __iter__(self) -> Iterator[int]:
        return iter(range(len(self._net)))

    def __len__(self) -> int:
        return len(self._net)

    def gamma(self, idx: int) -> GammaParams:
        return prior_gamma(*self[idx])

    def subset(self, indices: Sequence[int]) -> Dict[int, Tuple[float, float]]:
        return {i: self[i] for i in indices}
