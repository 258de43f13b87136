"""
Synthetic ground truth and the held-out evaluation protocol.

`generate` builds a road network with known per-link Gamma travel times and
simulates trips over it. Held-out trips are cut into pieces of fixed
duration and scored against a model: L1/L2 distance between the observed
duration and the predicted mean, and the predictive log-likelihood, bucketed
by piece duration.
"""
from __future__ import annotations

import bisect
import logging
import math
from dataclasses import dataclass, field, replace
from functools import partial
from typing import Callable, Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from traveltime.errors import ConfigError, InvalidRecordError, TravelTimeError
from traveltime.em import ModelState
from traveltime.gamma_stats import GammaParams, SeriesConfig, path_log_likelihood
from traveltime.models import Link, RoadNetwork, TrajectoryMeasurement, activation_vector

logger = logging.getLogger(__name__)

DEFAULT_PIECE_LENGTHS_S = (60.0, 300.0, 600.0, 1200.0)
DEFAULT_BUCKETS_MIN = (1.0, 3.0, 7.0, 14.0, 30.0)
TRAIN, TEST = "train", "test"
METRICS = ("l1", "l2", "rel_l1", "rel_l2", "log_likelihood", "normalized_log_likelihood")


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the synthetic network and trip generator.

    Ground-truth link means are the free-flow time (length / speed limit)
    times a congestion factor; shapes are drawn uniformly. `correlation`
    moves that fraction of the smallest shape on a trip into a component
    shared by all its links, leaving every link marginal unchanged.
    """

    n_links: int = 100
    length_min_m: float = 100.0
    length_max_m: float = 800.0
    speed_min_mps: float = 8.0
    speed_max_mps: float = 20.0
    shape_min: float = 2.0
    shape_max: float = 8.0
    congestion_min: float = 1.2
    congestion_max: float = 2.5
    trips_per_hour: float = 400.0
    hours: float = 24.0
    links_per_trip_min: int = 2
    links_per_trip_max: int = 6
    correlation: float = 0.0
    # 2024-01-01 00:00 UTC, a Monday.
    start_time: float = 1_704_067_200.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_links < 4:
            raise ConfigError("must be >= 4", "synthetic.n_links")
        if not 0.0 <= self.correlation < 1.0:
            raise ConfigError("must lie in [0, 1)", "synthetic.correlation")
        if not 1 <= self.links_per_trip_min <= self.links_per_trip_max:
            raise ConfigError("need 1 <= links_per_trip_min <= links_per_trip_max", "synthetic.links_per_trip_min")
        if self.links_per_trip_max > self.n_links // 2:
            raise ConfigError("must not exceed half the number of links", "synthetic.links_per_trip_max")
        for lo, hi in (
            ("length_min_m", "length_max_m"),
            ("speed_min_mps", "speed_max_mps"),
            ("shape_min", "shape_max"),
            ("congestion_min", "congestion_max"),
        ):
            if not 0 < getattr(self, lo) <= getattr(self, hi):
                raise ConfigError(f"need 0 < {lo} <= {hi}", f"synthetic.{lo}")


@dataclass(frozen=True)
class SyntheticTrip:
    """One simulated trip with the travel time of every link it touched.

    `link_times_s` are full-link travel times; the trip covers
    [offset_start_m, L] of the first link and [0, offset_end_m] of the last.
    """

    id: str
    start_time: float
    path: Tuple[str, ...]
    lengths_m: Tuple[float, ...]
    link_times_s: Tuple[float, ...]
    offset_start_m: float
    offset_end_m: float
    split: str = ""

    def segment_times(self) -> List[float]:
        """Time spent on each link of the path."""
        times = list(self.link_times_s)
        if len(times) == 1:
            times[0] *= (self.offset_end_m - self.offset_start_m) / self.lengths_m[0]
        else:
            times[0] *= 1.0 - self.offset_start_m / self.lengths_m[0]
            times[-1] *= self.offset_end_m / self.lengths_m[-1]
        return times

    @property
    def duration_s(self) -> float:
        return math.fsum(self.segment_times())

    def measurement(self) -> TrajectoryMeasurement:
        return TrajectoryMeasurement(
            id=self.id,
            start_time=self.start_time,
            duration_s=self.duration_s,
            path=self.path,
            offset_start_m=self.offset_start_m,
            offset_end_m=self.offset_end_m,
            split=self.split,
        )


class SyntheticData(NamedTuple):
    network: RoadNetwork
    trajectories: List[TrajectoryMeasurement]
    ground_truth: Dict[str, GammaParams]
    trips: List[SyntheticTrip]


def _build_network(spec: SyntheticSpec, rng: np.random.Generator) -> Tuple[RoadNetwork, List[List[int]]]:
    # A one-way ring with shortcuts that skip one node.
    n_shortcuts = spec.n_links // 4
    n_ring = spec.n_links - n_shortcuts
    lengths = rng.uniform(spec.length_min_m, spec.length_max_m, size=spec.n_links)
    speeds = rng.uniform(spec.speed_min_mps, spec.speed_max_mps, size=spec.n_links)
    links: List[Link] = []
    outgoing: List[List[int]] = [[] for _ in range(n_ring)]
    for i in range(n_ring):
        links.append(Link(f"L{i:05d}", f"n{i}", f"n{(i + 1) % n_ring}", float(lengths[i]), float(speeds[i])))
        outgoing[i].append(i)
    starts = rng.choice(n_ring, size=n_shortcuts, replace=n_shortcuts > n_ring)
    for j, s in enumerate(starts):
        idx = n_ring + j
        links.append(Link(f"S{j:05d}", f"n{s}", f"n{(s + 2) % n_ring}", float(lengths[idx]), float(speeds[idx])))
        outgoing[int(s)].append(idx)
    return RoadNetwork.from_links(links), outgoing


def _to_node(net: RoadNetwork, idx: int) -> int:
    return int(net.links[idx].to_node[1:])


def generate(spec: SyntheticSpec) -> SyntheticData:
    """Simulate a network, its ground-truth Gammas and a day of trips.

    Deterministic given `spec.seed`. Trajectories are whole trips sorted by
    start time; `trips` keeps the per-link timings needed for cutting.
    """
    rng = np.random.default_rng(spec.seed)
    net, outgoing = _build_network(spec, rng)
    n = len(net)
    free_flow = np.array([l.length_m / l.speed_limit_mps for l in net.links])
    means = free_flow * rng.uniform(spec.congestion_min, spec.congestion_max, size=n)
    shapes = rng.uniform(spec.shape_min, spec.shape_max, size=n)
    thetas = means / shapes
    truth = {net.links[i].id: GammaParams(float(shapes[i]), float(thetas[i])) for i in range(n)}

    n_trips = int(rng.poisson(spec.trips_per_hour * spec.hours))
    starts = np.sort(rng.uniform(spec.start_time, spec.start_time + spec.hours * 3600.0, size=n_trips))
    n_ring = len(outgoing)
    trips: List[SyntheticTrip] = []
    for t_idx, t0 in enumerate(starts):
        m = int(rng.integers(spec.links_per_trip_min, spec.links_per_trip_max + 1))
        node = int(rng.integers(n_ring))
        path: List[int] = []
        for _ in range(m):
            choices = outgoing[node]
            idx = choices[int(rng.integers(len(choices)))]
            path.append(idx)
            node = _to_node(net, idx)
        k = shapes[path]
        th = thetas[path]
        if spec.correlation > 0:
            shared_shape = spec.correlation * float(k.min())
            shared = rng.gamma(shared_shape)
            times = th * (rng.gamma(k - shared_shape) + shared)
        else:
            times = rng.gamma(k, th)
        lengths = tuple(net.links[i].length_m for i in path)
        o_start = float(rng.uniform(0.0, lengths[0]))
        if m == 1:
            o_end = float(rng.uniform(o_start, lengths[0]))
        else:
            o_end = float(rng.uniform(0.0, lengths[-1]))
        trips.append(
            SyntheticTrip(
                id=f"trip-{spec.seed}-{t_idx:07d}",
                start_time=float(t0),
                path=tuple(net.links[i].id for i in path),
                lengths_m=lengths,
                link_times_s=tuple(float(x) for x in times),
                offset_start_m=o_start,
                offset_end_m=o_end,
            )
        )
    trajectories = [t.measurement() for t in trips if t.duration_s > 0]
    logger.info(f"Generated {n}-link network and {len(trips)} trips (correlation={spec.correlation})")
    return SyntheticData(net, trajectories, truth, trips)


def split_by_trip(
    trips: Sequence[SyntheticTrip],
    holdout_fraction: float = 0.2,
    seed: int = 0,
) -> Tuple[List[SyntheticTrip], List[SyntheticTrip]]:
    """Tag a random `holdout_fraction` of trips as test, the rest as train."""
    if not 0.0 < holdout_fraction < 1.0:
        raise ConfigError("must lie in (0, 1)", "eval.holdout_fraction")
    rng = np.random.default_rng(seed)
    held = rng.random(len(trips)) < holdout_fraction
    train = [replace(t, split=TRAIN) for t, h in zip(trips, held) if not h]
    test = [replace(t, split=TEST) for t, h in zip(trips, held) if h]
    return train, test


def _position_at(trip: SyntheticTrip, bounds: Sequence[float], t: float, at_end: bool) -> Tuple[int, float]:
    """(link position in path, offset) of the vehicle `t` seconds into the trip.

    On a link boundary the start of a piece is placed on the next link and
    the end of a piece on the previous one.
    """
    n = len(trip.path)
    if at_end:
        j = min(max(bisect.bisect_left(bounds, t) - 1, 0), n - 1)
    else:
        j = min(max(bisect.bisect_right(bounds, t) - 1, 0), n - 1)
    seg_start = bounds[j]
    first_offset = trip.offset_start_m if j == 0 else 0.0
    speed = trip.lengths_m[j] / trip.link_times_s[j]
    offset = first_offset + (t - seg_start) * speed
    return j, min(max(offset, 0.0), trip.lengths_m[j])


def _cut_trip(trip: SyntheticTrip, piece_s: float) -> List[TrajectoryMeasurement]:
    seg = trip.segment_times()
    bounds = [0.0]
    for s in seg:
        bounds.append(bounds[-1] + s)
    n_pieces = int(bounds[-1] // piece_s)
    pieces = []
    for i in range(n_pieces):
        t0, t1 = i * piece_s, (i + 1) * piece_s
        j0, o0 = _position_at(trip, bounds, t0, at_end=False)
        j1, o1 = _position_at(trip, bounds, t1, at_end=True)
        if j1 < j0 or (j0 == j1 and o1 <= o0):
            continue
        pieces.append(
            TrajectoryMeasurement(
                id=f"{trip.id}/{int(piece_s)}/{i}",
                start_time=trip.start_time + t0,
                duration_s=piece_s,
                path=trip.path[j0:j1 + 1],
                offset_start_m=o0,
                offset_end_m=o1,
                split=trip.split,
            )
        )
    return pieces


def cut_trajectories(
    trips: Iterable[SyntheticTrip],
    piece_lengths_s: Union[float, Sequence[float]] = DEFAULT_PIECE_LENGTHS_S,
) -> List[TrajectoryMeasurement]:
    """Cut each trip into consecutive non-overlapping pieces of each length.

    The remainder shorter than a piece is dropped. Pieces inherit the
    trip's split tag.
    """
    lengths = [float(piece_lengths_s)] if isinstance(piece_lengths_s, (int, float)) else [float(p) for p in piece_lengths_s]
    if any(p <= 0 for p in lengths):
        raise ConfigError("piece lengths must be > 0", "eval.piece_lengths_s")
    out: List[TrajectoryMeasurement] = []
    for trip in trips:
        for p in lengths:
            out.extend(_cut_trip(trip, p))
    return out


def _continues(prev: TrajectoryMeasurement, nxt: TrajectoryMeasurement, tol_s: float = 1e-6) -> bool:
    if abs(prev.start_time + prev.duration_s - nxt.start_time) > tol_s:
        return False
    if prev.path[-1] == nxt.path[0]:
        return abs(prev.offset_end_m - nxt.offset_start_m) <= 1e-6
    # A reading that ends on a link boundary is followed by one starting the next link.
    return nxt.offset_start_m <= 1e-6


def _join(readings: Sequence[TrajectoryMeasurement], piece_id: str) -> TrajectoryMeasurement:
    path = list(readings[0].path)
    for r in readings[1:]:
        path.extend(r.path[1:] if r.path[0] == path[-1] else r.path)
    return TrajectoryMeasurement(
        id=piece_id,
        start_time=readings[0].start_time,
        duration_s=math.fsum(r.duration_s for r in readings),
        path=tuple(path),
        offset_start_m=readings[0].offset_start_m,
        offset_end_m=readings[-1].offset_end_m,
        split=readings[0].split,
    )


def cut_readings(readings: Sequence[TrajectoryMeasurement], piece_length_s: float) -> List[TrajectoryMeasurement]:
    """Concatenate consecutive readings of one vehicle into pieces of `piece_length_s`.

    Readings must be in time order. A gap (the next reading does not start
    where the previous one ended) restarts the piece; leftovers are dropped.
    """
    if piece_length_s <= 0:
        raise ConfigError("must be > 0", "eval.piece_lengths_s")
    pieces: List[TrajectoryMeasurement] = []
    current: List[TrajectoryMeasurement] = []
    for r in readings:
        if current and not _continues(current[-1], r):
            current = []
        current.append(r)
        if math.fsum(c.duration_s for c in current) >= piece_length_s - 1e-6:
            pieces.append(_join(current, f"{current[0].id}+{len(current)}"))
            current = []
    return pieces


# --- scoring -------------------------------------------------------------------

@dataclass(frozen=True)
class EvalConfig:
    piece_lengths_s: Tuple[float, ...] = DEFAULT_PIECE_LENGTHS_S
    bucket_edges_min: Tuple[float, ...] = DEFAULT_BUCKETS_MIN
    holdout_fraction: float = 0.2
    confidence_z: float = 1.96

    def __post_init__(self) -> None:
        edges = self.bucket_edges_min
        if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
            raise ConfigError("must be strictly increasing with at least two edges", "eval.bucket_edges_min")


@dataclass(frozen=True)
class PieceScore:
    piece_id: str
    duration_s: float
    predicted_mean_s: float
    predicted_stddev_s: float
    log_likelihood: float

    @property
    def abs_error(self) -> float:
        return abs(self.duration_s - self.predicted_mean_s)

    @property
    def normalized_log_likelihood(self) -> float:
        # Scale-free: the log-density of the standardized duration.
        return self.log_likelihood + math.log(self.predicted_stddev_s)


@dataclass(frozen=True)
class Estimate:
    value: float
    ci_low: float
    ci_high: float

    def as_list(self) -> List[float]:
        return [self.value, self.ci_low, self.ci_high]


@dataclass(frozen=True)
class BucketReport:
    label: str
    low_min: float
    high_min: float
    n: int
    metrics: Mapping[str, Estimate]

    def to_dict(self) -> Dict[str, object]:
        data: Dict[str, object] = {"bucket": self.label, "n": self.n}
        data.update({name: est.as_list() for name, est in self.metrics.items()})
        return data


@dataclass(frozen=True)
class EvalReport:
    buckets: Tuple[BucketReport, ...]
    n_pieces: int
    excluded: Mapping[str, int] = field(default_factory=dict)

    def bucket(self, label: str) -> BucketReport:
        for b in self.buckets:
            if b.label == label:
                return b
        raise KeyError(label)

    def to_frame(self) -> pd.DataFrame:
        """Plot-ready rows: bucket, metric, value, ci_low, ci_high, n."""
        rows = [
            {"bucket": b.label, "metric": name, "value": est.value, "ci_low": est.ci_low, "ci_high": est.ci_high, "n": b.n}
            for b in self.buckets
            for name, est in b.metrics.items()
        ]
        return pd.DataFrame(rows, columns=["bucket", "metric", "value", "ci_low", "ci_high", "n"])


def _mean_ci(values: np.ndarray, z: float) -> Estimate:
    n = values.size
    if n == 0:
        return Estimate(math.nan, math.nan, math.nan)
    mean = float(values.mean())
    half = z * float(values.std(ddof=1)) / math.sqrt(n) if n > 1 else math.nan
    return Estimate(mean, mean - half, mean + half)


def _rms_ci(errors: np.ndarray, z: float) -> Estimate:
    # Delta method on the mean squared error.
    sq = _mean_ci(errors ** 2, z)
    if math.isnan(sq.value):
        return sq
    rms = math.sqrt(sq.value)
    if rms == 0.0:
        return Estimate(0.0, 0.0, 0.0)
    half = (sq.ci_high - sq.value) / (2.0 * rms)
    return Estimate(rms, max(rms - half, 0.0), rms + half)


def _bucket_label(lo: float, hi: float, last: bool) -> str:
    return f"[{lo:g},{hi:g}{']' if last else ')'} min"


def score_piece(
    piece: TrajectoryMeasurement,
    net: RoadNetwork,
    params: Mapping[int, GammaParams],
    series: SeriesConfig = SeriesConfig(),
) -> Union[PieceScore, str]:
    """Score one piece, or return the reason it is excluded."""
    try:
        obs = activation_vector(piece, net)
    except TravelTimeError as e:
        return type(e).__name__
    missing = [l for l in obs.links if l not in params]
    if missing:
        return "MissingParametersError"
    mean = math.fsum(a * params[l].mean for l, a in zip(obs.links, obs.alpha))
    var = math.fsum((a * params[l].stddev) ** 2 for l, a in zip(obs.links, obs.alpha))
    try:
        ll = path_log_likelihood(obs, params, series)
    except TravelTimeError as e:
        return type(e).__name__
    return PieceScore(piece.id, piece.duration_s, mean, math.sqrt(var), ll)


def summarize(scores: Iterable[PieceScore], cfg: EvalConfig = EvalConfig(), excluded: Optional[Mapping[str, int]] = None) -> EvalReport:
    """Bucket piece scores by observed duration and attach normal-approximation CIs."""
    edges = cfg.bucket_edges_min
    per_bucket: List[List[PieceScore]] = [[] for _ in range(len(edges) - 1)]
    excluded = dict(excluded or {})
    n_pieces = 0
    for s in scores:
        n_pieces += 1
        minutes = s.duration_s / 60.0
        idx = bisect.bisect_right(edges, minutes) - 1
        if idx == len(edges) - 1 and minutes == edges[-1]:
            idx -= 1
        if not 0 <= idx < len(per_bucket):
            excluded["out_of_range"] = excluded.get("out_of_range", 0) + 1
            continue
        per_bucket[idx].append(s)

    z = cfg.confidence_z
    buckets = []
    for i, items in enumerate(per_bucket):
        lo, hi = edges[i], edges[i + 1]
        d = np.array([s.duration_s for s in items])
        err = np.array([s.duration_s - s.predicted_mean_s for s in items])
        rel = err / d if items else err
        metrics = {
            "l1": _mean_ci(np.abs(err), z),
            "l2": _rms_ci(err, z),
            "rel_l1": _mean_ci(np.abs(rel), z),
            "rel_l2": _rms_ci(rel, z),
            "log_likelihood": _mean_ci(np.array([s.log_likelihood for s in items]), z),
            "normalized_log_likelihood": _mean_ci(np.array([s.normalized_log_likelihood for s in items]), z),
        }
        buckets.append(BucketReport(_bucket_label(lo, hi, i == len(per_bucket) - 1), lo, hi, len(items), metrics))
    return EvalReport(tuple(buckets), n_pieces, excluded)


def evaluate(
    model: Union[ModelState, Mapping[int, GammaParams]],
    pieces: Iterable[TrajectoryMeasurement],
    net: RoadNetwork,
    series: SeriesConfig = SeriesConfig(),
    cfg: EvalConfig = EvalConfig(),
    map_fn: Callable = map,
) -> EvalReport:
    """Score held-out pieces against per-link Gamma parameters.

    Raises:
        InvalidRecordError: a piece is tagged as training data.
    """
    params = model.params if isinstance(model, ModelState) else model
    pieces = list(pieces)
    for p in pieces:
        if p.split == TRAIN:
            raise InvalidRecordError(f"piece '{p.id}' is tagged as training data")
    results = list(map_fn(partial(score_piece, net=net, params=params, series=series), pieces))
    excluded: Dict[str, int] = {}
    scores = []
    for r in results:
        if isinstance(r, str):
            excluded[r] = excluded.get(r, 0) + 1
        else:
            scores.append(r)
    if excluded:
        logger.info(f"Excluded {sum(excluded.values())} of {len(pieces)} pieces: {excluded}")
    return summarize(scores, cfg, excluded)


def compare_reports(reports: Mapping[str, EvalReport]) -> pd.DataFrame:
    """Side-by-side table: one row per (bucket, metric), one column per report."""
    frames = []
    for name, report in reports.items():
        df = report.to_frame().set_index(["bucket", "metric"])[["value"]]
        frames.append(df.rename(columns={"value": name}))
    if not frames:
        return pd.DataFrame()
    return pd.concat(frames, axis=1).reset_index()
