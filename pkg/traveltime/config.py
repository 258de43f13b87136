"""
Process settings and run configuration.

Process settings (log level, worker count, seed, output directory) come
from the environment, optionally through a `.env` file, and are grouped in
one class per environment. `get_config()` picks the class named by
`APP_ENV`.

A run configuration is a JSON document with one section per component.
It is assembled as: schema defaults < named profile < config file <
environment < `--set section.field=value` overrides, then validated by
`RunConfigSchema` before any work starts.
"""
from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional

from dotenv import load_dotenv
from marshmallow import ValidationError, fields, missing

from traveltime.em import EmConfig
from traveltime.errors import ConfigError
from traveltime.evaluation import EvalConfig, SyntheticSpec
from traveltime.gamma_stats import SeriesConfig
from traveltime.models import DAY_S, DecayConfig, PriorConfig
from traveltime.schemas import SECTION_SCHEMAS, RunConfigSchema
from traveltime.streaming import SchedulerConfig

load_dotenv()


class Config:
    """Settings shared by every environment."""

    APP_NAME = "traveltime"
    LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO").upper()
    # Overrides scheduler.workers when set.
    WORKERS = os.getenv("TRAVELTIME_WORKERS")
    SEED = os.getenv("TRAVELTIME_SEED")
    OUTPUT_DIR = os.getenv("TRAVELTIME_OUTPUT_DIR")
    DEBUG = False
    TESTING = False


class DevelopmentConfig(Config):
    DEBUG = True
    LOG_LEVEL = os.getenv("LOG_LEVEL", "DEBUG").upper()


class TestingConfig(Config):
    TESTING = True
    DEBUG = True
    LOG_LEVEL = "DEBUG"
    WORKERS = None
    SEED = None
    OUTPUT_DIR = None


class ProductionConfig(Config):
    LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO").upper()


def get_config() -> type:
    """Configuration class for `APP_ENV` (production by default)."""
    env = os.getenv("APP_ENV", "production").lower()
    if env == "development":
        return DevelopmentConfig
    if env == "testing":
        return TestingConfig
    return ProductionConfig


current_config = get_config()


# Experiment presets: overlays applied on top of the schema defaults.
PROFILES: Dict[str, Dict[str, Any]] = {
    "SlidingBig": {
        "em": {"weeks_lookback": 10, "day_window_s": 7200, "num_samples": 100, "num_iterations": 5, "time_step_s": 1200},
    },
    "SlidingBig1": {
        "em": {"weeks_lookback": 10, "day_window_s": 2400, "num_samples": 100, "num_iterations": 5, "time_step_s": 1200},
    },
    # Ten days of history hold exactly one earlier slice of the same weekday.
    "SlidingBig2": {
        "em": {"weeks_lookback": 1, "day_window_s": 7200, "num_samples": 100, "num_iterations": 5, "time_step_s": 1200},
    },
    "SlidingBig3": {
        "em": {"weeks_lookback": 10, "day_window_s": 7200, "num_samples": 100, "num_iterations": 1, "time_step_s": 240},
    },
    "SlidingBig4": {
        "em": {"weeks_lookback": 10, "day_window_s": 7200, "num_samples": 10, "num_iterations": 5, "time_step_s": 1200},
    },
}


@dataclass(frozen=True)
class Paths:
    """Input and output locations; unset outputs go under `output_dir`."""

    output_dir: str = "output"
    network: Optional[str] = None
    trajectories: Optional[str] = None
    test_trajectories: Optional[str] = None
    ground_truth: Optional[str] = None
    estimates: Optional[str] = None
    compare_estimates: Optional[str] = None
    metrics: Optional[str] = None
    report: Optional[str] = None
    history_dir: Optional[str] = None

    def resolve(self, name: str, default_file: str) -> Path:
        value = getattr(self, name)
        return Path(value) if value else Path(self.output_dir) / default_file


@dataclass(frozen=True)
class RunConfig:
    em: EmConfig = field(default_factory=EmConfig)
    decay: DecayConfig = field(default_factory=DecayConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    series: SeriesConfig = field(default_factory=SeriesConfig)
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: Paths = field(default_factory=Paths)
    seed: int = 0
    profile: Optional[str] = None


def _merge(base: Dict[str, Any], overlay: Mapping[str, Any]) -> Dict[str, Any]:
    out = copy.deepcopy(base)
    for key, value in overlay.items():
        if isinstance(value, Mapping) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _flatten_messages(messages: Any, prefix: str = "") -> List[str]:
    if isinstance(messages, Mapping):
        out = []
        for key, value in messages.items():
            path = f"{prefix}.{key}" if prefix else str(key)
            out.extend(_flatten_messages(value, path))
        return out
    if isinstance(messages, (list, tuple)) and messages and all(isinstance(m, str) for m in messages):
        return [f"{prefix}: {' '.join(messages)}"]
    return [f"{prefix}: {messages}"]


def parse_override(item: str) -> Dict[str, Any]:
    """`section.field=value` as a nested dict; the value is parsed as JSON when possible."""
    key, sep, raw = item.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"expected section.field=value, got '{item}'", "--set")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.strip().split(".")
    nested: Dict[str, Any] = {}
    cursor = nested
    for part in parts[:-1]:
        cursor = cursor.setdefault(part, {})
    cursor[parts[-1]] = value
    return nested


def read_config_file(path: os.PathLike) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}: invalid JSON ({e.msg})") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return data


def _env_overlay(env: type) -> Dict[str, Any]:
    overlay: Dict[str, Any] = {}
    if env.WORKERS:
        try:
            overlay["scheduler"] = {"workers": int(env.WORKERS)}
        except ValueError:
            raise ConfigError(f"expected an integer, got '{env.WORKERS}'", "TRAVELTIME_WORKERS") from None
    if env.SEED:
        try:
            overlay["seed"] = int(env.SEED)
        except ValueError:
            raise ConfigError(f"expected an integer, got '{env.SEED}'", "TRAVELTIME_SEED") from None
    if env.OUTPUT_DIR:
        overlay["paths"] = {"output_dir": env.OUTPUT_DIR}
    return overlay


def load_run_config(
    path: Optional[os.PathLike] = None,
    profile: Optional[str] = None,
    overrides: Iterable[str] = (),
    env: Optional[type] = None,
) -> RunConfig:
    """Assemble and validate a run configuration.

    Raises:
        ConfigError: unknown profile, unreadable file, or a value failing
            validation (the message names the dotted field path).
    """
    env = env if env is not None else current_config
    file_data = read_config_file(path) if path is not None else {}
    name = profile or file_data.get("profile")
    if name is not None and name not in PROFILES:
        raise ConfigError(f"unknown profile '{name}' (choose from {', '.join(PROFILES)})", "profile")

    data: Dict[str, Any] = {}
    if name is not None:
        data = _merge(data, PROFILES[name])
    data = _merge(data, file_data)
    data = _merge(data, _env_overlay(env))
    for item in overrides:
        data = _merge(data, parse_override(item))
    if name is not None:
        data["profile"] = name

    try:
        loaded = RunConfigSchema().load(data)
    except ValidationError as e:
        raise ConfigError("; ".join(_flatten_messages(e.messages))) from e
    return build_run_config(loaded)


def build_run_config(loaded: Mapping[str, Any]) -> RunConfig:
    scheduler: SchedulerConfig = loaded["scheduler"]
    series: SeriesConfig = loaded["series"]
    em = EmConfig(**loaded["em"], series=series, shards=scheduler.shards)
    if DAY_S % em.time_step_s != 0:
        raise ConfigError("must divide a day (86400 s)", "em.time_step_s")
    decay_data = dict(loaded["decay"])
    if decay_data["day_window_s"] is None:
        decay_data["day_window_s"] = em.day_window_s
    if decay_data["week_window_count"] is None:
        decay_data["week_window_count"] = max(1, em.weeks_lookback)
    paths = Paths(**{k: v for k, v in loaded["paths"].items() if v is not None})
    return RunConfig(
        em=em,
        decay=DecayConfig(**decay_data),
        prior=loaded["prior"],
        series=series,
        scheduler=scheduler,
        synthetic=SyntheticSpec(**loaded["synthetic"], seed=loaded["seed"]),
        eval=loaded["eval"],
        paths=paths,
        seed=loaded["seed"],
        profile=loaded["profile"],
    )


def _default_of(f: fields.Field) -> Any:
    default = f.load_default
    if default is missing:
        return "required"
    if callable(default):
        default = default()
    return "unset" if default is None else default


def describe_config() -> str:
    """Every configuration field with its default, one per line."""
    lines = ["configuration fields (section.field = default):", "  seed = 0", "  profile = unset"]
    for section, schema_cls in SECTION_SCHEMAS.items():
        for name, f in schema_cls().fields.items():
            lines.append(f"  {section}.{name} = {_default_of(f)}")
    lines.append(f"profiles: {', '.join(PROFILES)}")
    lines.append("environment: LOG_LEVEL, APP_ENV, TRAVELTIME_WORKERS, TRAVELTIME_SEED, TRAVELTIME_OUTPUT_DIR")
    return "\n".join(lines)
