"""
Estimation sessions and the offline / streaming / bench drivers.

A session turns a time-ordered flow of observations into one model state per
time step of data time. Step k collects observations with start times in
[k*T, (k+1)*T) and yields the estimate valid at (k+1)*T. The offline and the
streaming drivers feed the same session type, so for identical inputs they
produce identical states.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from functools import partial
from operator import attrgetter
from typing import Callable, Iterable, List, Optional, Sequence

from traveltime.config import RunConfig
from traveltime.em import EmConfig, ModelState, SeedStream, assemble_window, em_iterate, initial_state
from traveltime.errors import TravelTimeError
from traveltime.io import HistoricalStore
from traveltime.models import (
    WEEK_S,
    ConversionStats,
    DecayConfig,
    Observation,
    PriorConfig,
    RoadNetwork,
    TrajectoryMeasurement,
    observations_from_trajectories,
    prior_table,
    to_observations,
)
from traveltime.streaming import BatchMetrics, MicroBatch, SchedulerConfig, StreamingContext, WorkerPool

logger = logging.getLogger(__name__)

StateCallback = Callable[[ModelState], None]
MetricsCallback = Callable[[BatchMetrics], None]


class EstimationSession:
    """Online EM over a time-ordered flow of observations.

    Every closed step stores its observations in the historical store, runs
    `em_iterate` on the decay-weighted window at the step end, and hands the
    new state to `on_state`. Steps between two observed steps are closed too,
    so the state sequence has no holes.
    """

    def __init__(
        self,
        net: RoadNetwork,
        em_cfg: EmConfig = EmConfig(),
        decay_cfg: DecayConfig = DecayConfig(),
        prior_cfg: PriorConfig = PriorConfig(),
        seed: int = 0,
        history: Optional[HistoricalStore] = None,
        map_fn: Callable = map,
        on_state: Optional[StateCallback] = None,
    ) -> None:
        self.net = net
        self.em_cfg = em_cfg
        self.decay_cfg = decay_cfg
        self.prior = prior_table(net, prior_cfg)
        self.seeds = SeedStream(seed)
        self.history = history if history is not None else HistoricalStore(em_cfg.time_step_s, tz_offset_s=decay_cfg.tz_offset_s)
        self.map_fn = map_fn
        self.on_state = on_state
        self.state: ModelState = initial_state()
        self.steps = 0
        self.late = 0
        self.error: Optional[TravelTimeError] = None
        self._open: Optional[int] = None
        self._last_seen: Optional[int] = None
        self._pending: List[Observation] = []

    @property
    def time_step_s(self) -> float:
        return self.em_cfg.time_step_s

    def step_of(self, t: float) -> int:
        return int(math.floor(t / self.time_step_s))

    def _close(self) -> ModelState:
        step = self._open
        t_end = (step + 1) * self.time_step_s
        pending, self._pending = self._pending, []
        self.history.store(pending)
        window = assemble_window(pending, self.history, t_end, self.em_cfg, self.decay_cfg)
        self.state = em_iterate(window, self.state, self.prior, self.em_cfg, self.seeds, time_index=t_end, map_fn=self.map_fn)
        horizon = t_end - self.em_cfg.weeks_lookback * WEEK_S - self.em_cfg.day_window_s - self.time_step_s
        self.history.prune(horizon)
        self.steps += 1
        self._open = step + 1
        if self.on_state is not None:
            self.on_state(self.state)
        return self.state

    def feed(self, observations: Iterable[Observation]) -> List[ModelState]:
        """Add observations; returns the states of the steps this closed."""
        closed = []
        for obs in observations:
            k = self.step_of(obs.time)
            if self._open is None:
                self._open = k
            if k < self._open:
                self.late += 1
                logger.warning(f"Dropped late observation '{obs.id}' at t={obs.time} (step {k} already closed)")
                continue
            while self._open < k:
                closed.append(self._close())
            self._pending.append(obs)
            self._last_seen = k
        return closed

    def advance_to(self, t: float) -> List[ModelState]:
        """Close observed steps that end at or before `t`."""
        closed = []
        if self._open is None or self._last_seen is None:
            return closed
        while self._open <= self._last_seen and (self._open + 1) * self.time_step_s <= t:
            closed.append(self._close())
        return closed

    def feed_batch(self, batch: MicroBatch[Observation]) -> None:
        """Sink for a stream of observation batches."""
        try:
            self.feed(batch.records)
            self.advance_to(batch.interval_end)
        except TravelTimeError as e:
            # The sink wrapper only counts failures; keep the first for the driver.
            if self.error is None:
                self.error = e
            raise

    def flush(self) -> List[ModelState]:
        """Close every step up to the last one that saw an observation."""
        closed = []
        if self._open is None or self._last_seen is None:
            return closed
        while self._open <= self._last_seen:
            closed.append(self._close())
        return closed

    def prior_state(self, time_index: float = 0.0) -> ModelState:
        """Prior-only estimates for every link."""
        params = {i: self.prior.gamma(i) for i in range(len(self.net))}
        return ModelState(time_index=time_index, params=params, n_effective={i: 0.0 for i in params})


def session_for(cfg: RunConfig, net: RoadNetwork, map_fn: Callable = map, on_state: Optional[StateCallback] = None) -> EstimationSession:
    history = None
    if cfg.paths.history_dir:
        history = HistoricalStore(cfg.em.time_step_s, root=cfg.paths.history_dir, tz_offset_s=cfg.decay.tz_offset_s)
    return EstimationSession(
        net,
        em_cfg=cfg.em,
        decay_cfg=cfg.decay,
        prior_cfg=cfg.prior,
        seed=cfg.seed,
        history=history,
        map_fn=map_fn,
        on_state=on_state,
    )


@dataclass
class RunSummary:
    steps: int = 0
    observations: int = 0
    rejected: int = 0
    late: int = 0
    batches: int = 0
    deadline_misses: int = 0
    failures: int = 0
    final_state: Optional[ModelState] = None
    conversion: ConversionStats = field(default_factory=ConversionStats)


def run_offline(
    cfg: RunConfig,
    net: RoadNetwork,
    trajectories: Iterable[TrajectoryMeasurement],
    on_state: Optional[StateCallback] = None,
    pool: Optional[WorkerPool] = None,
) -> RunSummary:
    """Batch EM over the whole input, step by step, without the streaming engine.

    Empty input yields a single prior-only state.
    """
    stats = ConversionStats()
    observations = sorted(observations_from_trajectories(trajectories, net, stats), key=lambda o: (o.time, o.id))
    own_pool = pool is None
    pool = pool if pool is not None else WorkerPool(cfg.scheduler.workers, cfg.scheduler.executor)
    try:
        session = session_for(cfg, net, map_fn=pool.map, on_state=on_state)
        session.feed(observations)
        session.flush()
    finally:
        if own_pool:
            pool.close()

    final = session.state
    if not observations:
        logger.warning("No usable observations; writing prior-only estimates")
        final = session.prior_state()
        if on_state is not None:
            on_state(final)
    logger.info(f"Offline run finished: {session.steps} steps over {len(observations)} observations ({stats.rejected} rejected)")
    return RunSummary(
        steps=session.steps,
        observations=len(observations),
        rejected=stats.rejected,
        late=session.late,
        final_state=final,
        conversion=stats,
    )


def run_streaming(
    cfg: RunConfig,
    net: RoadNetwork,
    batches: Iterable[MicroBatch[TrajectoryMeasurement]],
    on_state: Optional[StateCallback] = None,
    on_metrics: Optional[MetricsCallback] = None,
    scheduler: Optional[SchedulerConfig] = None,
) -> RunSummary:
    """Replay batches through the streaming engine with one EM step per time step.

    Raises:
        TravelTimeError: the first error raised by the estimation sink.
    """
    scheduler = scheduler if scheduler is not None else cfg.scheduler
    summary = RunSummary()
    with StreamingContext(scheduler) as ctx:
        session = session_for(cfg, net, map_fn=ctx.pool.map, on_state=on_state)
        trajectories = ctx.source("trajectories")
        observations = trajectories.flat_map(partial(to_observations, net), key=attrgetter("id"))
        observations.for_each_batch(session.feed_batch)

        for metrics in ctx.run({"trajectories": batches}):
            summary.batches += 1
            summary.observations += metrics.records_out
            summary.rejected += metrics.records_in - metrics.records_out
            summary.deadline_misses += int(metrics.deadline_missed)
            summary.failures += metrics.failures
            if on_metrics is not None:
                on_metrics(metrics)
            if session.error is not None:
                raise session.error
        session.flush()

    summary.steps = session.steps
    summary.late = session.late
    summary.final_state = session.state
    logger.info(
        f"Streaming run finished: {summary.batches} batches, {summary.steps} steps, "
        f"{summary.deadline_misses} deadline misses, {summary.failures} failures"
    )
    return summary


@dataclass(frozen=True)
class BenchTrial:
    rate_multiplier: float
    intervals: int
    records: int
    deadline_misses: int
    max_processing_s: float
    wall_time_s: float

    @property
    def sustained(self) -> bool:
        return self.intervals > 0 and self.deadline_misses == 0


@dataclass(frozen=True)
class BenchResult:
    best_rate: float
    observations_per_second: float
    workers: int
    horizon_intervals: int
    trials: Sequence[BenchTrial]


def bench_trial(
    cfg: RunConfig,
    net: RoadNetwork,
    batches: Sequence[MicroBatch[TrajectoryMeasurement]],
    rate_multiplier: float,
) -> BenchTrial:
    """One unpaced run at `rate_multiplier`: a batch misses when it takes longer than the scaled deadline."""
    scheduler = replace(cfg.scheduler, rate_multiplier=rate_multiplier, pace=False)
    metrics: List[BatchMetrics] = []
    started = time.monotonic()
    run_streaming(cfg, net, batches, on_metrics=metrics.append, scheduler=scheduler)
    return BenchTrial(
        rate_multiplier=rate_multiplier,
        intervals=len(metrics),
        records=sum(m.records_in for m in metrics),
        deadline_misses=sum(int(m.deadline_missed) for m in metrics),
        max_processing_s=max((m.processing_time_s for m in metrics), default=0.0),
        wall_time_s=time.monotonic() - started,
    )


def bench(
    cfg: RunConfig,
    net: RoadNetwork,
    batches: Iterable[MicroBatch[TrajectoryMeasurement]],
    horizon_intervals: int = 60,
    min_rate: float = 1.0 / 64,
    max_rate: float = 1024.0,
    steps: int = 12,
) -> BenchResult:
    """Highest replay rate multiplier that runs the horizon without a deadline miss.

    The bracket [min_rate, max_rate] is bisected geometrically; the reported
    rate is the best sustained rate tried (0 if even `min_rate` misses).
    """
    horizon: List[MicroBatch[TrajectoryMeasurement]] = []
    for b in batches:
        horizon.append(b)
        if len(horizon) >= horizon_intervals:
            break
    trials: List[BenchTrial] = []
    lo, hi = min_rate, max_rate
    best = 0.0
    first = bench_trial(cfg, net, horizon, lo)
    trials.append(first)
    if first.sustained:
        best = lo
        top = bench_trial(cfg, net, horizon, hi)
        trials.append(top)
        if top.sustained:
            best = hi
        else:
            for _ in range(steps):
                mid = math.sqrt(lo * hi)
                trial = bench_trial(cfg, net, horizon, mid)
                trials.append(trial)
                if trial.sustained:
                    lo = best = mid
                else:
                    hi = mid
    records = sum(len(b) for b in horizon)
    data_span = len(horizon) * cfg.scheduler.interval_s
    ops = records * best / data_span if data_span > 0 else 0.0
    logger.info(f"Bench: best sustained rate x{best:.4g} ({ops:.1f} observations/s) with {cfg.scheduler.workers} workers")
    return BenchResult(
        best_rate=best,
        observations_per_second=ops,
        workers=cfg.scheduler.workers,
        horizon_intervals=len(horizon),
        trials=tuple(trials),
    )

