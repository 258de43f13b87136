"""Shared fixtures: a small hand-built network and a fast run configuration."""
import pytest

from traveltime import create_app
from traveltime.config import TestingConfig, load_run_config
from traveltime.models import Link, RoadNetwork, TrajectoryMeasurement

MONDAY = 1_704_067_200.0


@pytest.fixture(scope="session", autouse=True)
def app():
    return create_app(TestingConfig)


@pytest.fixture()
def net():
    """Four links: a - b - c - d in a row plus a parallel b -> c link."""
    return RoadNetwork.from_links(
        [
            Link("A", "a", "b", 100.0, 10.0),
            Link("B", "b", "c", 200.0, 10.0),
            Link("C", "c", "d", 100.0, 10.0),
            Link("D", "b", "c", 700.0, 10.0),
        ]
    )


@pytest.fixture()
def trajectory():
    def make(id="t0", start_time=MONDAY, duration_s=40.0, path=("A", "B", "C"), offset_start_m=25.0, offset_end_m=50.0, split=""):
        return TrajectoryMeasurement(id, start_time, duration_s, tuple(path), offset_start_m, offset_end_m, split)

    return make


@pytest.fixture()
def fast_overrides(tmp_path):
    return [
        f"paths.output_dir={tmp_path / 'out'}",
        "synthetic.n_links=8",
        "synthetic.trips_per_hour=60",
        "synthetic.hours=1",
        "synthetic.links_per_trip_max=3",
        "em.num_samples=8",
        "em.num_iterations=2",
        "em.time_step_s=600",
        "em.weeks_lookback=0",
        "scheduler.executor=\"thread\"",
    ]


@pytest.fixture()
def run_config(fast_overrides):
    return load_run_config(overrides=fast_overrides, env=TestingConfig)
