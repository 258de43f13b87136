"""
marshmallow schemas for every record format and configuration section.

Record schemas turn JSON-lines rows into domain objects (`post_load`) and
back (`dump`). Configuration schemas validate each section of a run
configuration; `RunConfigSchema` nests them.
"""
from __future__ import annotations

from typing import Any, Dict

from marshmallow import EXCLUDE, RAISE, Schema, ValidationError, fields, post_load, pre_load, validate, validates_schema

from traveltime.em import EmConfig
from traveltime.evaluation import DEFAULT_BUCKETS_MIN, DEFAULT_PIECE_LENGTHS_S, EvalConfig, SyntheticSpec
from traveltime.gamma_stats import SeriesConfig
from traveltime.models import DecayConfig, Observation, PriorConfig, TrajectoryMeasurement
from traveltime.streaming import EXECUTORS, SchedulerConfig

FORMAT_VERSION = 1
SECTION_NAMES = ("em", "decay", "prior", "series", "scheduler", "synthetic", "eval", "paths")

_positive = validate.Range(min=0, min_inclusive=False)
_non_negative = validate.Range(min=0)


class HeaderSchema(Schema):
    format_version = fields.Int(required=True, validate=validate.Equal(FORMAT_VERSION))

    class Meta:
        unknown = EXCLUDE


# --- records -------------------------------------------------------------------

class TrajectorySchema(Schema):
    id = fields.Str(required=True, validate=validate.Length(min=1))
    start_time = fields.Float(required=True)
    duration_s = fields.Float(required=True, validate=_positive)
    path = fields.List(fields.Str(validate=validate.Length(min=1)), required=True, validate=validate.Length(min=1))
    offset_start_m = fields.Float(required=True, validate=_non_negative)
    offset_end_m = fields.Float(required=True, validate=_non_negative)
    split = fields.Str(load_default="")

    class Meta:
        fields = ("id", "start_time", "duration_s", "path", "offset_start_m", "offset_end_m", "split")
        ordered = True
        unknown = EXCLUDE

    @post_load
    def make_trajectory(self, data: Dict[str, Any], **kwargs) -> TrajectoryMeasurement:
        data["path"] = tuple(data["path"])
        return TrajectoryMeasurement(**data)


class ObservationSchema(Schema):
    id = fields.Str(required=True)
    links = fields.List(fields.Int(validate=_non_negative), required=True, validate=validate.Length(min=1))
    alpha = fields.List(fields.Float(validate=validate.Range(min=0, max=1, min_inclusive=False)), required=True)
    duration_s = fields.Float(required=True, validate=_positive)
    time = fields.Float(required=True)

    class Meta:
        ordered = True
        unknown = RAISE

    @validates_schema
    def check_lengths(self, data: Dict[str, Any], **kwargs) -> None:
        if len(data["links"]) != len(data["alpha"]):
            raise ValidationError("links and alpha differ in length", "alpha")

    @post_load
    def make_observation(self, data: Dict[str, Any], **kwargs) -> Observation:
        data["links"] = tuple(data["links"])
        data["alpha"] = tuple(data["alpha"])
        return Observation(**data)


class EstimateSchema(Schema):
    time = fields.Float(required=True)
    link_id = fields.Str(required=True)
    k = fields.Float(required=True, validate=_positive)
    theta = fields.Float(required=True, validate=_positive)
    mean_s = fields.Float(required=True)
    stddev_s = fields.Float(required=True)
    n_effective = fields.Float(load_default=0.0)

    class Meta:
        ordered = True
        unknown = RAISE


class GroundTruthSchema(Schema):
    link_id = fields.Str(required=True)
    k = fields.Float(required=True, validate=_positive)
    theta = fields.Float(required=True, validate=_positive)

    class Meta:
        ordered = True


class BatchMetricsSchema(Schema):
    interval_index = fields.Int()
    interval_start = fields.Float()
    records_in = fields.Int()
    records_out = fields.Int()
    processing_time_s = fields.Float()
    scheduling_delay_s = fields.Float()
    deadline_missed = fields.Bool()
    failures = fields.Int()
    throughput_rps = fields.Float()

    class Meta:
        ordered = True


class StepMetricsSchema(Schema):
    """Diagnostics of one estimation step, flattened from `ModelState.diagnostics`."""

    time = fields.Float(required=True)
    iterations = fields.Int()
    q_values = fields.List(fields.Float())
    q_stderr = fields.Float()
    log_normalizer = fields.Float()
    observed_log_likelihood = fields.Float()
    n_observations = fields.Int()
    n_samples = fields.Int()
    skipped = fields.Int()
    unscored = fields.Int()
    fit_failures = fields.Int()
    links_updated = fields.Int()
    seeded_links = fields.Int()
    links_estimated = fields.Int()

    class Meta:
        ordered = True


class BenchTrialSchema(Schema):
    rate_multiplier = fields.Float()
    intervals = fields.Int()
    records = fields.Int()
    deadline_misses = fields.Int()
    max_processing_s = fields.Float()
    wall_time_s = fields.Float()
    sustained = fields.Bool()

    class Meta:
        ordered = True


class BenchReportSchema(Schema):
    format_version = fields.Constant(FORMAT_VERSION)
    best_rate = fields.Float()
    observations_per_second = fields.Float()
    workers = fields.Int()
    horizon_intervals = fields.Int()
    trials = fields.List(fields.Nested(BenchTrialSchema))

    class Meta:
        ordered = True


class BucketReportSchema(Schema):
    bucket = fields.Str()
    n = fields.Int()
    l1 = fields.List(fields.Float())
    l2 = fields.List(fields.Float())
    rel_l1 = fields.List(fields.Float())
    rel_l2 = fields.List(fields.Float())
    log_likelihood = fields.List(fields.Float())
    normalized_log_likelihood = fields.List(fields.Float())

    class Meta:
        ordered = True


class EvalReportSchema(Schema):
    format_version = fields.Constant(FORMAT_VERSION)
    n_pieces = fields.Int()
    excluded = fields.Dict(keys=fields.Str(), values=fields.Int())
    buckets = fields.List(fields.Nested(BucketReportSchema))

    class Meta:
        ordered = True


# --- configuration ---------------------------------------------------------------

class SeriesSchema(Schema):
    rel_tol = fields.Float(load_default=SeriesConfig.rel_tol, validate=validate.Range(min=0, max=1, min_inclusive=False, max_inclusive=False))
    max_terms = fields.Int(load_default=SeriesConfig.max_terms, validate=validate.Range(min=1))

    class Meta:
        unknown = RAISE

    @post_load
    def make(self, data: Dict[str, Any], **kwargs) -> SeriesConfig:
        return SeriesConfig(**data)


class EmSchema(Schema):
    num_samples = fields.Int(load_default=EmConfig.num_samples, validate=validate.Range(min=1, max=10_000))
    num_iterations = fields.Int(load_default=EmConfig.num_iterations, validate=validate.Range(min=1, max=100))
    weeks_lookback = fields.Int(load_default=EmConfig.weeks_lookback, validate=validate.Range(min=0, max=52))
    day_window_s = fields.Float(load_default=EmConfig.day_window_s, validate=validate.Range(min=60, max=86_400))
    time_step_s = fields.Float(load_default=EmConfig.time_step_s, validate=validate.Range(min=5, max=3600))
    prior_strength = fields.Float(load_default=EmConfig.prior_strength, validate=_non_negative)
    prior_nodes = fields.Int(load_default=EmConfig.prior_nodes, validate=validate.Range(min=2, max=64))
    min_effective_samples = fields.Float(load_default=EmConfig.min_effective_samples, validate=_non_negative)
    weight_floor = fields.Float(load_default=EmConfig.weight_floor, validate=validate.Range(min=0, max=1, max_inclusive=False))
    importance_correction = fields.Bool(load_default=EmConfig.importance_correction)

    class Meta:
        unknown = RAISE

    @pre_load
    def resolve_aliases(self, data: Dict[str, Any], **kwargs) -> Dict[str, Any]:
        # Older configs name the sample count num_samples_U and invert the weighting switch.
        data = dict(data)
        if "num_samples_U" in data:
            value = data.pop("num_samples_U")
            if "num_samples" in data and data["num_samples"] != value:
                raise ValidationError("conflicts with num_samples", "num_samples_U")
            data["num_samples"] = value
        if "paper_faithful_sampling" in data:
            value = data.pop("paper_faithful_sampling")
            if not isinstance(value, bool):
                raise ValidationError("Not a valid boolean.", "paper_faithful_sampling")
            if "importance_correction" in data and data["importance_correction"] == value:
                raise ValidationError("conflicts with importance_correction", "paper_faithful_sampling")
            data["importance_correction"] = not value
        return data


class DecaySchema(Schema):
    # Unset windows follow the EM window (day_window_s, weeks_lookback).
    day_window_s = fields.Float(load_default=None, allow_none=True, validate=_positive)
    week_window_count = fields.Int(load_default=None, allow_none=True, validate=validate.Range(min=1))
    terminal_weight = fields.Float(load_default=DecayConfig.terminal_weight, validate=validate.Range(min=0, max=1, min_inclusive=False, max_inclusive=False))
    tz_offset_s = fields.Float(load_default=DecayConfig.tz_offset_s, validate=validate.Range(min=-14 * 3600, max=14 * 3600))

    class Meta:
        unknown = RAISE


class PriorSchema(Schema):
    speed_fraction = fields.Float(load_default=PriorConfig.speed_fraction, validate=validate.Range(min=0, max=1, min_inclusive=False))
    min_stddev_s = fields.Float(load_default=PriorConfig.min_stddev_s, validate=_non_negative)
    stddev_fraction = fields.Float(load_default=PriorConfig.stddev_fraction, validate=_non_negative)

    class Meta:
        unknown = RAISE

    @post_load
    def make(self, data: Dict[str, Any], **kwargs) -> PriorConfig:
        return PriorConfig(**data)


class SchedulerSchema(Schema):
    interval_s = fields.Float(load_default=SchedulerConfig.interval_s, validate=_positive)
    deadline_s = fields.Float(load_default=None, allow_none=True, validate=_positive)
    workers = fields.Int(load_default=SchedulerConfig.workers, validate=validate.Range(min=1))
    shards = fields.Int(load_default=SchedulerConfig.shards, validate=validate.Range(min=1))
    executor = fields.Str(load_default=SchedulerConfig.executor, validate=validate.OneOf(EXECUTORS))
    pace = fields.Bool(load_default=SchedulerConfig.pace)
    rate_multiplier = fields.Float(load_default=SchedulerConfig.rate_multiplier, validate=_positive)
    retain_batches = fields.Int(load_default=SchedulerConfig.retain_batches, validate=_non_negative)

    class Meta:
        unknown = RAISE

    @post_load
    def make(self, data: Dict[str, Any], **kwargs) -> SchedulerConfig:
        return SchedulerConfig(**data)


class SyntheticSchema(Schema):
    n_links = fields.Int(load_default=SyntheticSpec.n_links, validate=validate.Range(min=4))
    length_min_m = fields.Float(load_default=SyntheticSpec.length_min_m, validate=_positive)
    length_max_m = fields.Float(load_default=SyntheticSpec.length_max_m, validate=_positive)
    speed_min_mps = fields.Float(load_default=SyntheticSpec.speed_min_mps, validate=_positive)
    speed_max_mps = fields.Float(load_default=SyntheticSpec.speed_max_mps, validate=_positive)
    shape_min = fields.Float(load_default=SyntheticSpec.shape_min, validate=_positive)
    shape_max = fields.Float(load_default=SyntheticSpec.shape_max, validate=_positive)
    congestion_min = fields.Float(load_default=SyntheticSpec.congestion_min, validate=_positive)
    congestion_max = fields.Float(load_default=SyntheticSpec.congestion_max, validate=_positive)
    trips_per_hour = fields.Float(load_default=SyntheticSpec.trips_per_hour, validate=_positive)
    hours = fields.Float(load_default=SyntheticSpec.hours, validate=_positive)
    links_per_trip_min = fields.Int(load_default=SyntheticSpec.links_per_trip_min, validate=validate.Range(min=1))
    links_per_trip_max = fields.Int(load_default=SyntheticSpec.links_per_trip_max, validate=validate.Range(min=1))
    correlation = fields.Float(load_default=SyntheticSpec.correlation, validate=validate.Range(min=0, max=1, max_inclusive=False))
    start_time = fields.Float(load_default=SyntheticSpec.start_time)

    class Meta:
        unknown = RAISE

    @validates_schema
    def check_ranges(self, data: Dict[str, Any], **kwargs) -> None:
        for lo, hi in (
            ("length_min_m", "length_max_m"),
            ("speed_min_mps", "speed_max_mps"),
            ("shape_min", "shape_max"),
            ("congestion_min", "congestion_max"),
            ("links_per_trip_min", "links_per_trip_max"),
        ):
            if data[lo] > data[hi]:
                raise ValidationError(f"must not exceed {hi}", lo)


class EvalSchema(Schema):
    piece_lengths_s = fields.List(fields.Float(validate=_positive), load_default=list(DEFAULT_PIECE_LENGTHS_S), validate=validate.Length(min=1))
    bucket_edges_min = fields.List(fields.Float(validate=_non_negative), load_default=list(DEFAULT_BUCKETS_MIN), validate=validate.Length(min=2))
    holdout_fraction = fields.Float(load_default=EvalConfig.holdout_fraction, validate=validate.Range(min=0, max=1, min_inclusive=False, max_inclusive=False))
    confidence_z = fields.Float(load_default=EvalConfig.confidence_z, validate=_positive)

    class Meta:
        unknown = RAISE

    @post_load
    def make(self, data: Dict[str, Any], **kwargs) -> EvalConfig:
        return EvalConfig(
            piece_lengths_s=tuple(data["piece_lengths_s"]),
            bucket_edges_min=tuple(data["bucket_edges_min"]),
            holdout_fraction=data["holdout_fraction"],
            confidence_z=data["confidence_z"],
        )


class PathsSchema(Schema):
    output_dir = fields.Str(load_default=None, allow_none=True)
    network = fields.Str(load_default=None, allow_none=True)
    trajectories = fields.Str(load_default=None, allow_none=True)
    test_trajectories = fields.Str(load_default=None, allow_none=True)
    ground_truth = fields.Str(load_default=None, allow_none=True)
    estimates = fields.Str(load_default=None, allow_none=True)
    compare_estimates = fields.Str(load_default=None, allow_none=True)
    metrics = fields.Str(load_default=None, allow_none=True)
    report = fields.Str(load_default=None, allow_none=True)
    history_dir = fields.Str(load_default=None, allow_none=True)

    class Meta:
        unknown = RAISE


class RunConfigSchema(Schema):
    """A full run configuration. Loads into a plain dict of section objects."""

    profile = fields.Str(load_default=None, allow_none=True)
    seed = fields.Int(load_default=0, validate=_non_negative)
    em = fields.Nested(EmSchema)
    decay = fields.Nested(DecaySchema)
    prior = fields.Nested(PriorSchema)
    series = fields.Nested(SeriesSchema)
    scheduler = fields.Nested(SchedulerSchema)
    synthetic = fields.Nested(SyntheticSchema)
    eval = fields.Nested(EvalSchema)
    paths = fields.Nested(PathsSchema)

    class Meta:
        unknown = RAISE

    @pre_load
    def fill_sections(self, data: Dict[str, Any], **kwargs) -> Dict[str, Any]:
        # Missing sections still go through their schema to pick up defaults.
        data = dict(data)
        for name in SECTION_NAMES:
            if data.get(name) is None:
                data[name] = {}
        return data


SECTION_SCHEMAS = {
    "em": EmSchema,
    "decay": DecaySchema,
    "prior": PriorSchema,
    "series": SeriesSchema,
    "scheduler": SchedulerSchema,
    "synthetic": SyntheticSchema,
    "eval": EvalSchema,
    "paths": PathsSchema,
}

trajectory_schema = TrajectorySchema()
observation_schema = ObservationSchema()
estimate_schema = EstimateSchema()
ground_truth_schema = GroundTruthSchema()
batch_metrics_schema = BatchMetricsSchema()
step_metrics_schema = StepMetricsSchema()
header_schema = HeaderSchema()
