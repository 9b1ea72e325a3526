import numpy as np
import pytest

from solarcast.errors import AvailabilityError, ParameterError
from solarcast.grid import GeoGrid
from solarcast.nn.data import InputStats
from solarcast.nn.model import ModelPreset, TwoStageModel
from solarcast.pipeline import bundles_to_stack, build_cycle_world, cycle_window, plan_cycle, run_cycle
from solarcast.synth import WorldConfig, generate_episode
from solarcast.timeutil import HOUR, to_datetime, to_epoch

GRID = GeoGrid(33.0, 116.0, 0.05, 0.05, 16, 16)
PRESET = ModelPreset(image=16, patch=4, window=2, embed_dim=8, heads=2, depth_enc=1, depth_dec=1, depth_stage2=1)
START = "2025-07-01T00:00:00Z"


@pytest.mark.parametrize(
    "issue,latency,init",
    [
        ("2025-07-01T05:00Z", 1.0, "2025-07-01T00:00Z"),
        ("2025-07-01T07:30Z", 1.0, "2025-07-01T06:00Z"),
        ("2025-07-01T06:30Z", 1.0, "2025-07-01T00:00Z"),
        ("2025-07-01T07:00Z", 1.0, "2025-07-01T06:00Z"),
        ("2025-07-01T06:00Z", 0.0, "2025-07-01T06:00Z"),
        ("2025-07-01T02:00Z", 3.0, "2025-06-30T18:00Z"),
    ],
)
def test_plan_examples(issue, latency, init):
    plan = plan_cycle(issue, latency)
    assert plan.meteo_init == to_datetime(init)
    assert plan.sat_window[1] == to_datetime(issue)
    assert to_epoch(plan.sat_window[1]) - to_epoch(plan.sat_window[0]) == 5 * HOUR


def test_plan_errors():
    with pytest.raises(ParameterError):
        plan_cycle("2025-07-01T05:00Z", -1)
    with pytest.raises(AvailabilityError):
        plan_cycle("2025-07-01T05:00Z", 1.0, earliest="2025-07-01T06:00Z")


def test_plan_never_in_future():
    for h in range(48):
        issue = to_epoch(START) + h * HOUR + 1800 * (h % 2)
        init = to_epoch(plan_cycle(issue, 1.0).meteo_init)
        assert issue - 7 * HOUR < init <= issue - HOUR


@pytest.fixture(scope="module")
def world():
    return build_cycle_world(WorldConfig(grid=GRID, seed=5), START, 12)


@pytest.fixture(scope="module")
def model_and_stats():
    ep = generate_episode(WorldConfig(grid=GRID, seed=1), "2025-06-20T00:00Z", 30)
    return TwoStageModel(PRESET, seed=2), InputStats.fit([ep])


def test_runs_cover_window(world):
    plan = plan_cycle("2025-07-01T05:00Z")
    w = cycle_window(world, plan)
    assert w.x_sat.shape == (6, 4, 16, 16)
    assert w.x_bg.shape == (30, 3, 16, 16)
    assert w.ghi.shape == (24, 1, 16, 16)
    assert np.all(w.ghi[:, 0] <= w.clearsky + 1e-3)


def test_cycle_reads_only_released_runs(world, model_and_stats):
    model, stats = model_and_stats
    world.archive.access_log.clear()
    out = run_cycle(model, stats, world, START, 12, latency=1.0)
    assert len(out) == 12
    for f, key in zip(out, world.archive.access_log):
        assert key <= to_epoch(f.plan.issue) - HOUR
        assert key == to_epoch(f.plan.meteo_init)
    stack = bundles_to_stack(out, GRID)
    assert stack.data.shape == (12, 24, 16, 16)
    assert stack.channels[0] == "GHI+1" and stack.channels[-1] == "GHI+24"


def test_sentinel_runs_never_change_forecasts(model_and_stats):
    """Poison every run released after the first issue's cutoff and check
    the first issue's forecast is unchanged."""
    model, stats = model_and_stats
    clean = build_cycle_world(WorldConfig(grid=GRID, seed=5), START, 1)
    dirty = build_cycle_world(WorldConfig(grid=GRID, seed=5), START, 1)
    cutoff = to_epoch(START) - HOUR
    poisoned = 0
    for init, run in dirty.archive.runs.items():
        if init > cutoff:
            run.data[:] = 1e6
            poisoned += 1
    assert poisoned > 0
    a = run_cycle(model, stats, clean, START, 1)[0].bundle.ghi_hat
    b = run_cycle(model, stats, dirty, START, 1)[0].bundle.ghi_hat
    np.testing.assert_array_equal(a, b)
