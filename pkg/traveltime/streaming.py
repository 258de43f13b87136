"""
A small micro-batch (D-Stream) runtime.

A stream is a series of immutable per-interval batches. Operators are
declared on `DStream` handles obtained from a `StreamingContext`; nothing
runs until `StreamingContext.run` is handed the source batches. Each interval
the scheduler seals the source batches, evaluates the operator graph in
declaration order (which is a topological order by construction), and yields
a `BatchMetrics` record.

Stateless operators (map, flat_map, filter) split each batch into `shards`
by a stable hash of a record key (the record itself unless a `key` is
given) and hand the shards to a `WorkerPool`; stateful operators
(running_reduce, window) keep their state on the scheduler thread. A
sharded operator keeps the order of records within a shard only.
"""
from __future__ import annotations

import hashlib
import itertools
import logging
import math
import pickle
import time
from collections import deque
from concurrent.futures import Executor, ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import (
    Any,
    Callable,
    Deque,
    Dict,
    Generic,
    Hashable,
    Iterable,
    Iterator,
    List,
    Mapping,
    Optional,
    Sequence,
    Tuple,
    TypeVar,
)

from traveltime.errors import ConfigError, GraphConfigError

logger = logging.getLogger(__name__)

T = TypeVar("T")
U = TypeVar("U")

EXECUTORS = ("thread", "process")
# Tolerance when checking that window durations are multiples of the interval.
_ALIGN_EPS = 1e-9


def stable_hash(key: Any) -> int:
    """Process-independent 64-bit hash of `str(key)`."""
    digest = hashlib.blake2b(str(key).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def partition(items: Sequence[T], n: int) -> List[Tuple[T, ...]]:
    """Split `items` into `n` contiguous chunks of near-equal size."""
    size, extra = divmod(len(items), n)
    chunks = []
    start = 0
    for i in range(n):
        end = start + size + (1 if i < extra else 0)
        chunks.append(tuple(items[start:end]))
        start = end
    return chunks


@dataclass(frozen=True)
class MicroBatch(Generic[T]):
    """The records of one interval. Sealed at construction."""

    interval_index: int
    interval_start: float
    interval_length: float
    records: Tuple[T, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "records", tuple(self.records))

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[T]:
        return iter(self.records)

    @property
    def interval_end(self) -> float:
        return self.interval_start + self.interval_length

    def shards(self, n: int, key: Optional[Callable[[T], Hashable]] = None) -> List[Tuple[T, ...]]:
        """`n` shards of the records: by stable hash of `key(record)`, or
        contiguous chunks when no key is given."""
        if n < 1:
            raise ValueError("shard count must be >= 1")
        if key is None:
            return partition(self.records, n)
        buckets: List[List[T]] = [[] for _ in range(n)]
        for r in self.records:
            buckets[stable_hash(key(r)) % n].append(r)
        return [tuple(b) for b in buckets]

    def with_records(self, records: Iterable[U]) -> "MicroBatch[U]":
        return MicroBatch(self.interval_index, self.interval_start, self.interval_length, tuple(records))


@dataclass(frozen=True)
class SchedulerConfig:
    """Scheduler settings.

    `deadline_s` is the processing budget of one interval in data time
    (defaults to the interval); the wall-clock budget is
    `deadline_s / rate_multiplier`. With `pace` set, intervals are released
    on a wall-clock schedule of `interval_s / rate_multiplier`.
    """

    interval_s: float = 5.0
    deadline_s: Optional[float] = None
    workers: int = 1
    shards: int = 8
    executor: str = "process"
    pace: bool = False
    rate_multiplier: float = 1.0
    retain_batches: int = 256

    def __post_init__(self) -> None:
        if not (math.isfinite(self.interval_s) and self.interval_s > 0):
            raise ConfigError("must be > 0", "scheduler.interval_s")
        if self.deadline_s is not None and not self.deadline_s > 0:
            raise ConfigError("must be > 0", "scheduler.deadline_s")
        if self.workers < 1:
            raise ConfigError("must be >= 1", "scheduler.workers")
        if self.shards < 1:
            raise ConfigError("must be >= 1", "scheduler.shards")
        if self.executor not in EXECUTORS:
            raise ConfigError(f"must be one of {EXECUTORS}", "scheduler.executor")
        if not self.rate_multiplier > 0:
            raise ConfigError("must be > 0", "scheduler.rate_multiplier")
        if self.retain_batches < 0:
            raise ConfigError("must be >= 0", "scheduler.retain_batches")

    @property
    def budget_s(self) -> float:
        """Wall-clock processing budget of one interval."""
        return (self.deadline_s if self.deadline_s is not None else self.interval_s) / self.rate_multiplier


class WorkerPool:
    """Ordered parallel map over a thread or process pool.

    With one worker everything runs inline. Functions that cannot be pickled
    fall back to inline execution on a process pool.
    """

    def __init__(self, workers: int = 1, executor: str = "process") -> None:
        if workers < 1:
            raise ConfigError("must be >= 1", "scheduler.workers")
        if executor not in EXECUTORS:
            raise ConfigError(f"must be one of {EXECUTORS}", "scheduler.executor")
        self.workers = workers
        self.kind = executor
        self._executor: Optional[Executor] = None
        self._unpicklable: set = set()

    def _get_executor(self) -> Executor:
        if self._executor is None:
            if self.kind == "process":
                self._executor = ProcessPoolExecutor(max_workers=self.workers)
            else:
                self._executor = ThreadPoolExecutor(max_workers=self.workers)
            logger.debug(f"Started {self.kind} pool with {self.workers} workers")
        return self._executor

    def can_ship(self, fn: Callable) -> bool:
        if self.kind != "process":
            return True
        if id(fn) in self._unpicklable:
            return False
        try:
            pickle.dumps(fn)
        except (pickle.PicklingError, AttributeError, TypeError):
            self._unpicklable.add(id(fn))
            logger.warning(f"{getattr(fn, '__name__', fn)!r} cannot be pickled; running it inline")
            return False
        return True

    def map(self, fn: Callable[[T], U], items: Iterable[T]) -> List[U]:
        items = list(items)
        if self.workers == 1 or len(items) <= 1 or not self.can_ship(fn):
            return [fn(item) for item in items]
        return list(self._get_executor().map(fn, items))

    def close(self) -> None:
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None

    def __enter__(self) -> "WorkerPool":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


@dataclass
class BatchMetrics:
    interval_index: int
    interval_start: float
    records_in: int = 0
    records_out: int = 0
    processing_time_s: float = 0.0
    scheduling_delay_s: float = 0.0
    deadline_missed: bool = False
    failures: int = 0

    @property
    def throughput_rps(self) -> float:
        return self.records_in / self.processing_time_s if self.processing_time_s > 0 else 0.0

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["throughput_rps"] = self.throughput_rps
        return data


# --- operator graph ------------------------------------------------------------

def _apply_map(task: Tuple[Callable, Tuple[Any, ...]]) -> List[Any]:
    fn, chunk = task
    return [fn(r) for r in chunk]


def _apply_flat_map(task: Tuple[Callable, Tuple[Any, ...]]) -> List[Any]:
    fn, chunk = task
    return [out for r in chunk for out in fn(r)]


def _apply_filter(task: Tuple[Callable, Tuple[Any, ...]]) -> List[Any]:
    fn, chunk = task
    return [r for r in chunk if fn(r)]


@dataclass
class _RunState:
    """Per-run operator state, owned by the scheduler thread."""

    nodes: Dict[int, Any] = field(default_factory=dict)
    failures: int = 0


class _Node:
    stateful = False

    def __init__(self, ctx: "StreamingContext", parent: Optional["_Node"], name: str) -> None:
        self.ctx = ctx
        self.parent = parent
        self.name = name
        self.id = len(ctx._nodes)
        ctx._nodes.append(self)

    def upstream_stateful(self) -> bool:
        node: Optional[_Node] = self
        while node is not None:
            if node.stateful:
                return True
            node = node.parent
        return False

    def compute(self, batch: Optional[MicroBatch], state: _RunState, pool: WorkerPool) -> Optional[MicroBatch]:
        raise NotImplementedError


class _SourceNode(_Node):
    def compute(self, batch, state, pool):
        return batch


def _whole_record(record: Any) -> Any:
    return record


class _ShardedNode(_Node):
    _kernels = {"map": _apply_map, "flat_map": _apply_flat_map, "filter": _apply_filter}

    def __init__(self, ctx, parent, kind: str, fn: Callable, key: Optional[Callable[[Any], Hashable]] = None) -> None:
        super().__init__(ctx, parent, kind)
        self.kernel = self._kernels[kind]
        self.fn = fn
        self.key = key or _whole_record

    def compute(self, batch, state, pool):
        if batch is None:
            return None
        chunks = [c for c in batch.shards(self.ctx.cfg.shards, key=self.key) if c]
        try:
            tasks = [(self.fn, c) for c in chunks]
            if pool.can_ship(self.fn):
                parts = pool.map(self.kernel, tasks)
            else:
                parts = [self.kernel(t) for t in tasks]
        except Exception:
            state.failures += 1
            logger.exception(f"{self.name} failed on interval {batch.interval_index}; emitting an empty batch")
            return batch.with_records(())
        return batch.with_records(itertools.chain.from_iterable(parts))


class _GroupByKeyNode(_Node):
    def compute(self, batch, state, pool):
        if batch is None:
            return None
        groups: Dict[Hashable, List[Any]] = {}
        for k, v in batch:
            groups.setdefault(k, []).append(v)
        return batch.with_records((k, tuple(vs)) for k, vs in groups.items())


class _RunningReduceNode(_Node):
    stateful = True

    def __init__(self, ctx, parent, op: Callable[[Any, Any], Any]) -> None:
        super().__init__(ctx, parent, "running_reduce")
        self.op = op

    def compute(self, batch, state, pool):
        if batch is None:
            return None
        acc: Dict[Hashable, Any] = state.nodes.setdefault(self.id, {})
        updated = dict(acc)
        try:
            for k, v in batch:
                updated[k] = self.op(updated[k], v) if k in updated else v
        except Exception:
            state.failures += 1
            logger.exception(f"running_reduce failed on interval {batch.interval_index}; state left unchanged")
            updated = acc
        state.nodes[self.id] = updated
        return batch.with_records(updated.items())


class _WindowNode(_Node):
    stateful = True

    def __init__(self, ctx, parent, length_s: float, slide_s: float) -> None:
        super().__init__(ctx, parent, "window")
        interval = ctx.cfg.interval_s
        self.length = _intervals(length_s, interval, "length")
        self.slide = _intervals(slide_s, interval, "slide")

    def compute(self, batch, state, pool):
        if batch is None:
            return None
        recent: Deque[MicroBatch] = state.nodes.setdefault(self.id, deque(maxlen=self.length))
        recent.append(batch)
        if (batch.interval_index + 1) % self.slide != 0:
            return None
        first = recent[0]
        return MicroBatch(
            interval_index=batch.interval_index,
            interval_start=first.interval_start,
            interval_length=batch.interval_end - first.interval_start,
            records=tuple(itertools.chain.from_iterable(b.records for b in recent)),
        )


class _SinkNode(_Node):
    def __init__(self, ctx, parent, sink: Callable[[MicroBatch], Any]) -> None:
        super().__init__(ctx, parent, "for_each_batch")
        self.sink = sink

    def compute(self, batch, state, pool):
        return batch


def _intervals(duration_s: float, interval_s: float, what: str) -> int:
    ratio = duration_s / interval_s
    count = int(round(ratio))
    if count < 1 or abs(ratio - count) > _ALIGN_EPS * max(1.0, ratio):
        raise GraphConfigError(f"window {what} {duration_s}s is not a positive multiple of the {interval_s}s interval")
    return count


class DStream(Generic[T]):
    """Handle on a node of the operator graph."""

    def __init__(self, node: _Node) -> None:
        self._node = node

    @property
    def name(self) -> str:
        return self._node.name

    def map(self, fn: Callable[[T], U], key: Optional[Callable[[T], Hashable]] = None) -> "DStream[U]":
        return DStream(_ShardedNode(self._node.ctx, self._node, "map", fn, key))

    def flat_map(self, fn: Callable[[T], Iterable[U]], key: Optional[Callable[[T], Hashable]] = None) -> "DStream[U]":
        return DStream(_ShardedNode(self._node.ctx, self._node, "flat_map", fn, key))

    def filter(self, fn: Callable[[T], bool], key: Optional[Callable[[T], Hashable]] = None) -> "DStream[T]":
        return DStream(_ShardedNode(self._node.ctx, self._node, "filter", fn, key))

    def group_by_key(self) -> "DStream[Tuple[Any, Tuple[Any, ...]]]":
        return DStream(_GroupByKeyNode(self._node.ctx, self._node, "group_by_key"))

    def running_reduce(self, op: Callable[[Any, Any], Any]) -> "DStream[Tuple[Any, Any]]":
        """Per-key fold across all intervals so far; each output batch is the full state."""
        return DStream(_RunningReduceNode(self._node.ctx, self._node, op))

    def window(self, length_s: float, slide_s: float) -> "DStream[T]":
        """Concatenation of the last `length_s` worth of batches, emitted every `slide_s`.

        Raises:
            GraphConfigError: a duration is not a multiple of the interval.
        """
        return DStream(_WindowNode(self._node.ctx, self._node, length_s, slide_s))

    def for_each_batch(self, sink: Callable[[MicroBatch[T]], Any]) -> "DStream[T]":
        """Register `sink`, called once per emitted batch in interval order."""
        return DStream(_SinkNode(self._node.ctx, self._node, sink))


class StreamingContext:
    """Owns the operator graph, the worker pool and the scheduler loop."""

    def __init__(self, cfg: SchedulerConfig = SchedulerConfig(), pool: Optional[WorkerPool] = None) -> None:
        self.cfg = cfg
        self._nodes: List[_Node] = []
        self._sources: Dict[str, _SourceNode] = {}
        self._own_pool = pool is None
        self.pool = pool if pool is not None else WorkerPool(cfg.workers, cfg.executor)
        self._retained: Dict[str, Deque[MicroBatch]] = {}

    def source(self, name: str) -> DStream:
        if name in self._sources:
            raise GraphConfigError(f"source '{name}' declared twice")
        node = _SourceNode(self, None, name)
        self._sources[name] = node
        return DStream(node)

    def _check_sources(self, names: Iterable[str]) -> None:
        missing = set(self._sources) - set(names)
        if missing:
            raise GraphConfigError(f"no batches supplied for sources {sorted(missing)}")
        unknown = set(names) - set(self._sources)
        if unknown:
            raise GraphConfigError(f"batches supplied for undeclared sources {sorted(unknown)}")

    def _evaluate(
        self,
        inputs: Mapping[str, MicroBatch],
        state: _RunState,
        run_sinks: bool,
    ) -> Tuple[Dict[int, Optional[MicroBatch]], int]:
        outputs: Dict[int, Optional[MicroBatch]] = {}
        records_out = 0
        for node in self._nodes:
            if isinstance(node, _SourceNode):
                outputs[node.id] = inputs[node.name]
                continue
            result = node.compute(outputs[node.parent.id], state, self.pool)
            outputs[node.id] = result
            if run_sinks and isinstance(node, _SinkNode) and result is not None:
                records_out += len(result)
                try:
                    node.sink(result)
                except Exception:
                    state.failures += 1
                    logger.exception(f"Sink failed on interval {result.interval_index}")
        return outputs, records_out

    def _aligned(self, sources: Mapping[str, Iterable[MicroBatch]]) -> Iterator[Dict[str, MicroBatch]]:
        names = list(sources)
        iters = [iter(sources[n]) for n in names]
        for index in itertools.count():
            row = [next(it, None) for it in iters]
            if all(b is None for b in row):
                return
            present = [b for b in row if b is not None]
            start = present[0].interval_start
            length = present[0].interval_length
            batches = {}
            for name, b in zip(names, row):
                if b is None:
                    b = MicroBatch(present[0].interval_index, start, length, ())
                elif b.interval_index != present[0].interval_index:
                    raise GraphConfigError(
                        f"source '{name}' is at interval {b.interval_index}, expected {present[0].interval_index}"
                    )
                batches[name] = b
            yield batches

    def run(self, sources: Mapping[str, Iterable[MicroBatch]]) -> Iterator[BatchMetrics]:
        """Process the source batches interval by interval.

        Sources are consumed in lockstep; a source that runs out early
        contributes empty batches until all are exhausted.
        """
        self._check_sources(sources.keys())
        state = _RunState()
        self._retained = {name: deque(maxlen=self.cfg.retain_batches or None) for name in sources}
        period = self.cfg.interval_s / self.cfg.rate_multiplier
        origin = time.monotonic()
        ready_at = origin
        for position, batches in enumerate(self._aligned(sources)):
            due = origin + position * period
            if self.cfg.pace:
                pause = due - time.monotonic()
                if pause > 0:
                    time.sleep(pause)
            started = time.monotonic()
            delay = max(0.0, started - due) if self.cfg.pace else max(0.0, ready_at - started)

            for name, b in batches.items():
                self._retained[name].append(b)
            failures_before = state.failures
            _, records_out = self._evaluate(batches, state, run_sinks=True)
            elapsed = time.monotonic() - started
            ready_at = time.monotonic()

            first = next(iter(batches.values()))
            metrics = BatchMetrics(
                interval_index=first.interval_index,
                interval_start=first.interval_start,
                records_in=sum(len(b) for b in batches.values()),
                records_out=records_out,
                processing_time_s=elapsed,
                scheduling_delay_s=delay,
                deadline_missed=elapsed + delay > self.cfg.budget_s,
                failures=state.failures - failures_before,
            )
            if metrics.deadline_missed:
                logger.warning(
                    f"Interval {metrics.interval_index} missed its deadline: "
                    f"{elapsed:.3f}s processing + {delay:.3f}s delay > {self.cfg.budget_s:.3f}s"
                )
            logger.debug(f"Batch metrics: {metrics.to_dict()}")
            yield metrics
        logger.info("All sources drained; scheduler stopped")

    def recompute(self, stream: DStream, interval_index: int) -> Optional[MicroBatch]:
        """Rebuild the batch of `stream` at `interval_index` from retained source batches.

        Sinks are not invoked. Stateful operators are replayed from the
        first retained interval, so their lineage must be fully retained.

        Raises:
            GraphConfigError: the needed source batches are no longer retained.
        """
        if not self._retained:
            raise GraphConfigError("nothing to recompute: the context has not run")
        node = stream._node
        retained = {name: list(q) for name, q in self._retained.items()}
        first_index = min(q[0].interval_index for q in retained.values() if q) if any(retained.values()) else None
        if first_index is None or first_index > interval_index:
            raise GraphConfigError(f"interval {interval_index} is no longer retained")
        if node.upstream_stateful() and first_index != 0:
            raise GraphConfigError(f"lineage of '{node.name}' was truncated at interval {first_index}")

        state = _RunState()
        by_index = {name: {b.interval_index: b for b in batches} for name, batches in retained.items()}
        start = first_index if node.upstream_stateful() else interval_index
        result: Optional[MicroBatch] = None
        for idx in range(start, interval_index + 1):
            inputs = {}
            for name, batches in by_index.items():
                b = batches.get(idx)
                if b is None:
                    raise GraphConfigError(f"source '{name}' has no retained batch for interval {idx}")
                inputs[name] = b
            outputs, _ = self._evaluate(inputs, state, run_sinks=False)
            result = outputs[node.id]
        return result

    def close(self) -> None:
        if self._own_pool:
            self.pool.close()

    def __enter__(self) -> "StreamingContext":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def batches_from_records(
    records: Iterable[T],
    time_of: Callable[[T], float],
    interval_s: float,
    origin: Optional[float] = None,
) -> Iterator[MicroBatch[T]]:
    """Bin time-sorted records into consecutive interval batches, empty ones included.

    Intervals are anchored at `origin`, or at floor(t0 / interval) * interval.
    """
    current: List[T] = []
    index = 0
    start: Optional[float] = None
    for r in records:
        t = time_of(r)
        if start is None:
            start = origin if origin is not None else math.floor(t / interval_s) * interval_s
        while t >= start + (index + 1) * interval_s:
            yield MicroBatch(index, start + index * interval_s, interval_s, tuple(current))
            current = []
            index += 1
        current.append(r)
    if start is not None:
        yield MicroBatch(index, start + index * interval_s, interval_s, tuple(current))
