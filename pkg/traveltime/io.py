"""
File formats, replay and the historical observation store.

- Network: CSV with columns id,from,to,length_m,speed_limit_mps, optionally
  preceded by a `# format_version=1` comment line. Loaded with pandas.
- Trajectories, estimates, ground truth, batch metrics: JSON-lines files whose
  first line is the header `{"format_version": 1}`. Rows go through the
  marshmallow schemas in `traveltime.schemas`.
- Historical store: observations bucketed by (weekday, time-of-day slot),
  in memory or as one JSON-lines file per bucket.
"""
from __future__ import annotations

import json
import logging
import math
import os
import threading
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Any, Dict, Iterable, Iterator, List, Mapping, Optional, Tuple, Union

import pandas as pd
from marshmallow import Schema, ValidationError

from traveltime.em import ModelState
from traveltime.errors import (
    BatchOverflowError,
    ConfigError,
    DataError,
    InvalidRecordError,
    NetworkFormatError,
    OutputError,
    UnknownLinkError,
    UnsortedInputError,
)
from traveltime.evaluation import EvalReport
from traveltime.gamma_stats import GammaParams
from traveltime.models import DAY_S, Link, Observation, RoadNetwork, TrajectoryMeasurement, weekday_slot
from traveltime.schemas import (
    FORMAT_VERSION,
    BenchReportSchema,
    EvalReportSchema,
    batch_metrics_schema,
    estimate_schema,
    ground_truth_schema,
    header_schema,
    observation_schema,
    step_metrics_schema,
    trajectory_schema,
)
from traveltime.streaming import BatchMetrics, MicroBatch, batches_from_records

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]

NETWORK_COLUMNS = ["id", "from", "to", "length_m", "speed_limit_mps"]
NETWORK_HEADER_COMMENT = f"# format_version={FORMAT_VERSION}"
DEFAULT_MAX_BATCH_RECORDS = 1_000_000
HEADER = {"format_version": FORMAT_VERSION}


# --- network -------------------------------------------------------------------

def load_network(path: PathLike) -> RoadNetwork:
    """Read and validate a network CSV.

    Raises:
        NetworkFormatError: unreadable file, missing columns, unparsable or
            invalid values (with the file line number), duplicate ids.
    """
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            first = fh.readline().strip()
    except OSError as e:
        raise NetworkFormatError(f"cannot read network file {path}: {e}") from e
    skip = 0
    if first.startswith("#"):
        if first.replace(" ", "") != NETWORK_HEADER_COMMENT.replace(" ", ""):
            raise NetworkFormatError(f"unsupported header '{first}'", line=1)
        skip = 1

    try:
        df = pd.read_csv(path, skiprows=skip, dtype=str, keep_default_na=False, skipinitialspace=True)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise NetworkFormatError(f"cannot parse network file {path}: {e}") from e

    missing = [c for c in NETWORK_COLUMNS if c not in df.columns]
    if missing:
        raise NetworkFormatError(f"missing columns {missing}", line=skip + 1)

    # Data rows start after the optional comment and the column header.
    first_data_line = skip + 2
    for col in ("id", "from", "to"):
        empty = df[col].str.strip() == ""
        if empty.any():
            row = int(empty.to_numpy().nonzero()[0][0])
            raise NetworkFormatError(f"empty '{col}'", line=first_data_line + row, link_id=df["id"].iloc[row] or None)

    numeric = {}
    for col in ("length_m", "speed_limit_mps"):
        values = pd.to_numeric(df[col], errors="coerce")
        bad = ~(values > 0) | ~values.apply(math.isfinite)
        if bad.any():
            row = int(bad.to_numpy().nonzero()[0][0])
            raise NetworkFormatError(
                f"'{col}' must be a positive number, got '{df[col].iloc[row]}'",
                line=first_data_line + row,
                link_id=df["id"].iloc[row],
            )
        numeric[col] = values.to_numpy(dtype=float)

    dup = df["id"].duplicated()
    if dup.any():
        row = int(dup.to_numpy().nonzero()[0][0])
        raise NetworkFormatError("duplicate link id", line=first_data_line + row, link_id=df["id"].iloc[row])

    links = [
        Link(id=i, from_node=f, to_node=t, length_m=float(l), speed_limit_mps=float(s))
        for i, f, t, l, s in zip(df["id"], df["from"], df["to"], numeric["length_m"], numeric["speed_limit_mps"])
    ]
    net = RoadNetwork.from_links(links)
    logger.info(f"Loaded network of {len(net)} links from {path}")
    return net


def write_network(net: RoadNetwork, path: PathLike) -> None:
    df = pd.DataFrame(
        [(l.id, l.from_node, l.to_node, l.length_m, l.speed_limit_mps) for l in net.links],
        columns=NETWORK_COLUMNS,
    )
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(NETWORK_HEADER_COMMENT + "\n")
            df.to_csv(fh, index=False, float_format="%.17g")
    except OSError as e:
        raise OutputError(f"cannot write network file {path}: {e}") from e


# --- JSON-lines --------------------------------------------------------------------

@dataclass
class ReadStats:
    read: int = 0
    skipped: int = 0


def _dumps(record: Mapping[str, Any]) -> str:
    return json.dumps(record, separators=(",", ":"), allow_nan=False)


def _iter_rows(path: PathLike, schema: Schema, stats: ReadStats, what: str) -> Iterator[Any]:
    path = Path(path)
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot read {what} file {path}: {e}") from e
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as e:
                stats.skipped += 1
                logger.warning(f"{path}:{lineno}: malformed JSON skipped ({e.msg})")
                continue
            if isinstance(raw, dict) and "format_version" in raw:
                try:
                    header_schema.load(raw)
                except ValidationError as e:
                    raise DataError(f"{path}:{lineno}: unsupported header {e.messages}") from e
                continue
            try:
                record = schema.load(raw)
            except (ValidationError, InvalidRecordError, TypeError) as e:
                stats.skipped += 1
                detail = e.messages if isinstance(e, ValidationError) else str(e)
                logger.warning(f"{path}:{lineno}: invalid {what} record skipped: {detail}")
                continue
            stats.read += 1
            yield record


def read_trajectories(path: PathLike, stats: Optional[ReadStats] = None) -> Iterator[TrajectoryMeasurement]:
    """Lazily read trajectory measurements; malformed lines are skipped and counted."""
    return _iter_rows(path, trajectory_schema, stats if stats is not None else ReadStats(), "trajectory")


class JsonLinesWriter:
    """Writes a header line, then one schema-dumped record per line.

    A failed write leaves `<path>.partial` next to the file and raises
    `OutputError`.
    """

    def __init__(self, path: PathLike, schema: Schema) -> None:
        self.path = Path(path)
        self.schema = schema
        self.count = 0
        self._fh: Optional[IO[str]] = None
        self.marker = self.path.with_name(self.path.name + ".partial")

    def open(self) -> "JsonLinesWriter":
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "w", encoding="utf-8")
            self._fh.write(_dumps(HEADER) + "\n")
        except OSError as e:
            self._fail(e)
        if self.marker.exists():
            self.marker.unlink()
        return self

    def _fail(self, e: OSError) -> None:
        logger.exception(f"Write to {self.path} failed after {self.count} records")
        try:
            self.marker.write_text(f"incomplete after {self.count} records: {e}\n", encoding="utf-8")
        except OSError:
            pass
        raise OutputError(f"cannot write {self.path}: {e}") from e

    def write(self, record: Any) -> None:
        if self._fh is None:
            self.open()
        try:
            self._fh.write(_dumps(self.schema.dump(record)) + "\n")
        except OSError as e:
            self._fail(e)
        self.count += 1

    def flush(self) -> None:
        if self._fh is not None:
            try:
                self._fh.flush()
            except OSError as e:
                self._fail(e)

    def close(self) -> None:
        if self._fh is not None:
            try:
                self._fh.close()
            except OSError as e:
                self._fh = None
                self._fail(e)
            self._fh = None

    def __enter__(self) -> "JsonLinesWriter":
        return self.open()

    def __exit__(self, *exc) -> None:
        self.close()


def write_trajectories(trajectories: Iterable[TrajectoryMeasurement], path: PathLike) -> int:
    with JsonLinesWriter(path, trajectory_schema) as w:
        for t in trajectories:
            w.write(t)
        return w.count


def write_ground_truth(truth: Mapping[str, GammaParams], path: PathLike) -> int:
    with JsonLinesWriter(path, ground_truth_schema) as w:
        for link_id, p in truth.items():
            w.write({"link_id": link_id, "k": p.k, "theta": p.theta})
        return w.count


def read_ground_truth(path: PathLike) -> Dict[str, GammaParams]:
    return {row["link_id"]: GammaParams(row["k"], row["theta"]) for row in _iter_rows(path, ground_truth_schema, ReadStats(), "ground truth")}


# --- replay --------------------------------------------------------------------

@dataclass(frozen=True)
class ReplaySource:
    """A recorded trajectory file replayed as interval batches.

    `rate_multiplier` only changes how fast intervals are released by a
    paced scheduler; batch contents depend on record timestamps alone.
    """

    path: str
    rate_multiplier: float = 1.0
    interval_s: float = 5.0
    max_batch_records: int = DEFAULT_MAX_BATCH_RECORDS

    def __post_init__(self) -> None:
        if not self.rate_multiplier > 0:
            raise ConfigError("must be > 0", "scheduler.rate_multiplier")
        if not self.interval_s > 0:
            raise ConfigError("must be > 0", "scheduler.interval_s")
        if not Path(self.path).is_file():
            raise DataError(f"replay file {self.path} does not exist")


def _require_sorted(records: Iterable[TrajectoryMeasurement]) -> Iterator[TrajectoryMeasurement]:
    last = -math.inf
    for index, r in enumerate(records):
        if r.start_time < last:
            raise UnsortedInputError(index)
        last = r.start_time
        yield r


def replay(src: ReplaySource, stats: Optional[ReadStats] = None) -> Iterator[MicroBatch[TrajectoryMeasurement]]:
    """Batches of consecutive `interval_s` windows of record start times.

    Intervals are anchored at floor(t0 / interval) * interval; empty
    intervals in between are emitted too.

    Raises:
        UnsortedInputError: records are not sorted by start time.
        BatchOverflowError: an interval holds more than `max_batch_records`.
    """
    records = _require_sorted(read_trajectories(src.path, stats))
    for batch in batches_from_records(records, lambda r: r.start_time, src.interval_s):
        if len(batch) > src.max_batch_records:
            raise BatchOverflowError(
                f"interval {batch.interval_index} holds {len(batch)} records (cap {src.max_batch_records})"
            )
        yield batch


# --- estimates -----------------------------------------------------------------

@dataclass(frozen=True)
class EstimateRecord:
    time: float
    link_id: str
    k: float
    theta: float
    mean_s: float
    stddev_s: float
    n_effective: float = 0.0

    @property
    def params(self) -> GammaParams:
        return GammaParams(self.k, self.theta)


def estimate_rows(state: ModelState, net: RoadNetwork) -> Iterator[Dict[str, Any]]:
    for link in sorted(state.params):
        p = state.params[link]
        yield {
            "time": state.time_index,
            "link_id": net.links[link].id,
            "k": p.k,
            "theta": p.theta,
            "mean_s": p.mean,
            "stddev_s": p.stddev,
            "n_effective": float(state.n_effective.get(link, 0.0)),
        }


class EstimateWriter(JsonLinesWriter):
    """Appends one line per link and state, in the order states arrive."""

    def __init__(self, path: PathLike, net: RoadNetwork) -> None:
        super().__init__(path, estimate_schema)
        self.net = net
        self.states = 0

    def write_state(self, state: ModelState) -> None:
        for row in estimate_rows(state, self.net):
            self.write(row)
        self.states += 1
        self.flush()


def write_estimates(states: Iterable[ModelState], path: PathLike, net: RoadNetwork) -> int:
    """Write every state's per-link estimates; returns the number of lines."""
    with EstimateWriter(path, net) as w:
        for state in states:
            w.write_state(state)
        return w.count


def read_estimates(path: PathLike) -> List[EstimateRecord]:
    return [EstimateRecord(**row) for row in _iter_rows(path, estimate_schema, ReadStats(), "estimate")]


def load_model(path: PathLike, net: RoadNetwork, time: Optional[float] = None) -> ModelState:
    """The state at `time` (default: the last one) from an estimate file.

    Raises:
        UnknownLinkError: the file names a link the network does not have.
        DataError: the file holds no estimates for the requested time.
    """
    records = read_estimates(path)
    if not records:
        raise DataError(f"{path} holds no estimates")
    target = max(r.time for r in records) if time is None else time
    params: Dict[int, GammaParams] = {}
    n_eff: Dict[int, float] = {}
    for r in records:
        if r.time != target:
            continue
        idx = net.link_index.get(r.link_id)
        if idx is None:
            raise UnknownLinkError(r.link_id, str(path))
        params[idx] = r.params
        n_eff[idx] = r.n_effective
    if not params:
        raise DataError(f"{path} holds no estimates at time {target}")
    return ModelState(time_index=target, params=params, n_effective=n_eff)


class MetricsWriter(JsonLinesWriter):
    def __init__(self, path: PathLike) -> None:
        super().__init__(path, batch_metrics_schema)

    def write_metrics(self, metrics: BatchMetrics) -> None:
        self.write(metrics.to_dict())


def read_metrics(path: PathLike) -> List[Dict[str, Any]]:
    return list(_iter_rows(path, batch_metrics_schema, ReadStats(), "metrics"))


def step_row(state: ModelState) -> Dict[str, Any]:
    diag = state.diagnostics
    last = diag.final if diag is not None else None
    return {
        "time": state.time_index,
        "iterations": len(diag.iterations) if diag is not None else 0,
        "q_values": diag.q_values if diag is not None else [],
        "q_stderr": last.q_stderr if last is not None else 0.0,
        "log_normalizer": last.log_normalizer if last is not None else 0.0,
        "observed_log_likelihood": last.observed_log_likelihood if last is not None else 0.0,
        "n_observations": last.n_observations if last is not None else 0,
        "n_samples": last.n_samples if last is not None else 0,
        "skipped": last.skipped if last is not None else 0,
        "unscored": last.unscored if last is not None else 0,
        "fit_failures": last.fit_failures if last is not None else 0,
        "links_updated": last.links_updated if last is not None else 0,
        "seeded_links": diag.seeded_links if diag is not None else 0,
        "links_estimated": len(state.params),
    }


class StepMetricsWriter(JsonLinesWriter):
    """One line of EM diagnostics per estimation step."""

    def __init__(self, path: PathLike) -> None:
        super().__init__(path, step_metrics_schema)

    def write_state(self, state: ModelState) -> None:
        self.write(step_row(state))


def read_step_metrics(path: PathLike) -> List[Dict[str, Any]]:
    return list(_iter_rows(path, step_metrics_schema, ReadStats(), "step metrics"))


def write_bench(result: Any, path: PathLike) -> None:
    """Bench summary and every trial as one JSON document."""
    data = BenchReportSchema().dump(
        {
            "best_rate": result.best_rate,
            "observations_per_second": result.observations_per_second,
            "workers": result.workers,
            "horizon_intervals": result.horizon_intervals,
            "trials": [
                {
                    "rate_multiplier": t.rate_multiplier,
                    "intervals": t.intervals,
                    "records": t.records,
                    "deadline_misses": t.deadline_misses,
                    "max_processing_s": t.max_processing_s,
                    "wall_time_s": t.wall_time_s,
                    "sustained": t.sustained,
                }
                for t in result.trials
            ],
        }
    )
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(data, indent=2) + "\n", encoding="utf-8")
    except OSError as e:
        raise OutputError(f"cannot write bench report {path}: {e}") from e


# --- evaluation report -------------------------------------------------------------

def write_report(report: EvalReport, json_path: PathLike, csv_path: Optional[PathLike] = None) -> None:
    """JSON report plus the plot-ready CSV (bucket, metric, value, ci_low, ci_high, n)."""
    data = EvalReportSchema().dump(
        {"n_pieces": report.n_pieces, "excluded": dict(report.excluded), "buckets": [b.to_dict() for b in report.buckets]}
    )
    json_path = Path(json_path)
    csv_path = Path(csv_path) if csv_path is not None else json_path.with_suffix(".csv")
    try:
        json_path.parent.mkdir(parents=True, exist_ok=True)
        json_path.write_text(json.dumps(data, indent=2) + "\n", encoding="utf-8")
        report.to_frame().to_csv(csv_path, index=False)
    except OSError as e:
        raise OutputError(f"cannot write report {json_path}: {e}") from e


# --- historical store -----------------------------------------------------------

class HistoricalStore:
    """Observations bucketed by local (weekday, time-of-day slot).

    With `root` set, each bucket is also persisted to
    `root/weekday=<w>/slot=<s>.jsonl` and reloaded on construction. Readers
    may run concurrently; writes to one bucket are serialized by its lock.
    """

    def __init__(self, slot_s: float, root: Optional[PathLike] = None, tz_offset_s: float = 0.0) -> None:
        if not (slot_s > 0 and DAY_S % slot_s == 0):
            raise ConfigError("slot length must divide a day", "em.time_step_s")
        self.slot_s = float(slot_s)
        self.tz_offset_s = tz_offset_s
        self.root = Path(root) if root is not None else None
        self._buckets: Dict[Tuple[int, int], List[Observation]] = defaultdict(list)
        self._locks: Dict[Tuple[int, int], threading.Lock] = defaultdict(threading.Lock)
        self._guard = threading.Lock()
        if self.root is not None:
            self._load()

    def _bucket_path(self, key: Tuple[int, int]) -> Path:
        return self.root / f"weekday={key[0]}" / f"slot={key[1]}.jsonl"

    def _load(self) -> None:
        loaded = 0
        for path in sorted(self.root.glob("weekday=*/slot=*.jsonl")):
            try:
                key = (int(path.parent.name.split("=")[1]), int(path.stem.split("=")[1]))
            except (IndexError, ValueError):
                logger.warning(f"Ignoring unexpected file {path} in historical store")
                continue
            rows = list(_iter_rows(path, observation_schema, ReadStats(), "observation"))
            self._buckets[key].extend(rows)
            loaded += len(rows)
        if loaded:
            logger.info(f"Loaded {loaded} historical observations from {self.root}")

    def bucket_of(self, t: float) -> Tuple[int, int]:
        return weekday_slot(t, self.slot_s, self.tz_offset_s)

    def _lock(self, key: Tuple[int, int]) -> threading.Lock:
        with self._guard:
            return self._locks[key]

    def store(self, observations: Iterable[Observation]) -> int:
        """Append observations to their buckets; returns how many were stored."""
        grouped: Dict[Tuple[int, int], List[Observation]] = defaultdict(list)
        for obs in observations:
            grouped[self.bucket_of(obs.time)].append(obs)
        for key, items in grouped.items():
            with self._lock(key):
                if self.root is not None:
                    path = self._bucket_path(key)
                    try:
                        path.parent.mkdir(parents=True, exist_ok=True)
                        new_file = not path.exists()
                        with open(path, "a", encoding="utf-8") as fh:
                            if new_file:
                                fh.write(_dumps(HEADER) + "\n")
                            for obs in items:
                                fh.write(_dumps(observation_schema.dump(obs)) + "\n")
                    except OSError as e:
                        raise OutputError(f"cannot write historical bucket {path}: {e}") from e
                self._buckets[key] = self._buckets[key] + items
        return sum(len(v) for v in grouped.values())

    def query(self, weekday: int, slot: int) -> List[Observation]:
        """Observations stored under a bucket; empty if there are none."""
        return list(self._buckets.get((weekday, slot), ()))

    def query_range(self, start: float, end: float) -> Iterator[Observation]:
        """Observations with start <= time <= end, bucket by bucket."""
        if end < start:
            return
        first = math.floor((start + self.tz_offset_s) / self.slot_s)
        last = math.floor((end + self.tz_offset_s) / self.slot_s)
        # A range longer than a week revisits the same buckets.
        last = min(last, first + int(7 * DAY_S / self.slot_s) - 1)
        for g in range(first, last + 1):
            key = self.bucket_of((g + 0.5) * self.slot_s - self.tz_offset_s)
            for obs in self._buckets.get(key, ()):
                if start <= obs.time <= end:
                    yield obs

    def prune(self, before: float) -> int:
        """Drop observations older than `before` from memory and disk."""
        dropped = 0
        for key in list(self._buckets):
            with self._lock(key):
                kept = [o for o in self._buckets[key] if o.time >= before]
                removed = len(self._buckets[key]) - len(kept)
                if not removed:
                    continue
                dropped += removed
                self._buckets[key] = kept
                if self.root is not None:
                    path = self._bucket_path(key)
                    try:
                        with open(path, "w", encoding="utf-8") as fh:
                            fh.write(_dumps(HEADER) + "\n")
                            for obs in kept:
                                fh.write(_dumps(observation_schema.dump(obs)) + "\n")
                    except OSError as e:
                        raise OutputError(f"cannot rewrite historical bucket {path}: {e}") from e
        return dropped

    def buckets(self) -> List[Tuple[int, int]]:
        return sorted(k for k, v in self._buckets.items() if v)

    def __len__(self) -> int:
        return sum(len(v) for v in self._buckets.values())
