"""
Tests for run configuration assembly and validation.
"""
import json

import pytest

from traveltime.config import PROFILES, TestingConfig, describe_config, get_config, load_run_config, parse_override
from traveltime.errors import ConfigError


class WorkerEnv(TestingConfig):
    WORKERS = "3"
    SEED = "17"
    OUTPUT_DIR = "/tmp/from-env"


def test_defaults():
    cfg = load_run_config(env=TestingConfig)

    assert cfg.em.num_samples == 100
    assert cfg.em.num_iterations == 5
    assert cfg.em.time_step_s == 1200.0
    assert cfg.decay.day_window_s == cfg.em.day_window_s
    assert cfg.decay.week_window_count == cfg.em.weeks_lookback
    assert cfg.decay.terminal_weight == 0.2
    assert cfg.em.shards == cfg.scheduler.shards
    assert cfg.eval.bucket_edges_min == (1.0, 3.0, 7.0, 14.0, 30.0)
    assert cfg.paths.output_dir == "output"
    assert cfg.profile is None


@pytest.mark.parametrize("name", sorted(PROFILES))
def test_profiles(name):
    cfg = load_run_config(profile=name, env=TestingConfig)

    for key, value in PROFILES[name]["em"].items():
        assert getattr(cfg.em, key) == value
    assert cfg.profile == name


def test_profile_values():
    assert load_run_config(profile="SlidingBig1", env=TestingConfig).em.day_window_s == 2400.0
    assert load_run_config(profile="SlidingBig2", env=TestingConfig).em.weeks_lookback == 1
    fast = load_run_config(profile="SlidingBig3", env=TestingConfig).em
    assert (fast.num_iterations, fast.time_step_s) == (1, 240.0)
    assert load_run_config(profile="SlidingBig4", env=TestingConfig).em.num_samples == 10


def test_precedence(tmp_path):
    """Defaults < profile < file < environment < overrides"""
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"profile": "SlidingBig4", "em": {"num_iterations": 7}, "seed": 2, "scheduler": {"workers": 2}}))

    cfg = load_run_config(path, env=WorkerEnv, overrides=["em.num_iterations=9"])

    assert cfg.profile == "SlidingBig4"
    assert cfg.em.num_samples == 10
    assert cfg.em.num_iterations == 9
    assert cfg.scheduler.workers == 3
    assert cfg.seed == 17
    assert cfg.synthetic.seed == 17
    assert cfg.paths.output_dir == "/tmp/from-env"


def test_decay_windows_can_be_set_apart():
    cfg = load_run_config(env=TestingConfig, overrides=["decay.day_window_s=600", "decay.week_window_count=3"])

    assert cfg.decay.day_window_s == 600.0
    assert cfg.decay.week_window_count == 3
    assert cfg.em.day_window_s == 7200.0


@pytest.mark.parametrize(
    "override, field",
    [
        ("em.num_samples=0", "em.num_samples"),
        ("em.day_window_s=10", "em.day_window_s"),
        ("scheduler.executor=\"gpu\"", "scheduler.executor"),
        ("decay.terminal_weight=1.5", "decay.terminal_weight"),
        ("em.bogus=1", "em.bogus"),
        ("eval.bucket_edges_min=[5, 1]", "eval.bucket_edges_min"),
    ],
)
def test_invalid_values_name_the_field(override, field):
    with pytest.raises(ConfigError) as e:
        load_run_config(env=TestingConfig, overrides=[override])

    assert field in str(e.value)
    assert e.value.exit_code == 2

def test_legacy_em_keys_are_accepted():
    cfg = load_run_config(env=TestingConfig, overrides=["em.num_samples_U=40", "em.paper_faithful_sampling=true"])

    assert cfg.em.num_samples == 40
    assert cfg.em.importance_correction is False
    assert load_run_config(env=TestingConfig, overrides=["em.paper_faithful_sampling=false"]).em.importance_correction is True


@pytest.mark.parametrize(
    "overrides,field",
    [
        (["em.num_samples_U=40", "em.num_samples=50"], "em.num_samples_U"),
        (["em.paper_faithful_sampling=true", "em.importance_correction=true"], "em.paper_faithful_sampling"),
        (['em.paper_faithful_sampling="yes"'], "em.paper_faithful_sampling"),
    ],
)
def test_legacy_em_keys_must_agree(overrides, field):
    with pytest.raises(ConfigError) as e:
        load_run_config(env=TestingConfig, overrides=overrides)

    assert field in str(e.value)



def test_time_step_must_divide_a_day():
    with pytest.raises(ConfigError) as e:
        load_run_config(env=TestingConfig, overrides=["em.time_step_s=7"])

    assert e.value.field == "em.time_step_s"


def test_unknown_profile_and_bad_file(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(profile="Nope", env=TestingConfig)
    bad = tmp_path / "bad.json"
    bad.write_text("{\n  \"em\": \n")
    with pytest.raises(ConfigError) as e:
        load_run_config(bad, env=TestingConfig)
    assert "invalid JSON" in str(e.value)
    with pytest.raises(ConfigError):
        load_run_config(tmp_path / "absent.json", env=TestingConfig)


def test_bad_environment_value():
    class BadEnv(TestingConfig):
        WORKERS = "many"

    with pytest.raises(ConfigError) as e:
        load_run_config(env=BadEnv)
    assert e.value.field == "TRAVELTIME_WORKERS"


def test_parse_override():
    assert parse_override("em.num_samples=20") == {"em": {"num_samples": 20}}
    assert parse_override("paths.output_dir=out/run1") == {"paths": {"output_dir": "out/run1"}}
    assert parse_override("eval.piece_lengths_s=[60, 120]") == {"eval": {"piece_lengths_s": [60, 120]}}
    with pytest.raises(ConfigError):
        parse_override("em.num_samples")


def test_get_config(monkeypatch):
    monkeypatch.setenv("APP_ENV", "testing")
    assert get_config() is TestingConfig
    monkeypatch.setenv("APP_ENV", "production")
    assert get_config().__name__ == "ProductionConfig"


def test_describe_config_lists_every_section():
    text = describe_config()

    for section in ("em", "decay", "prior", "series", "scheduler", "synthetic", "eval", "paths"):
        assert f"  {section}." in text
    assert "em.num_samples = 100" in text
    assert "SlidingBig4" in text
