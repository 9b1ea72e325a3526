import numpy as np
import pytest

from solarcast.errors import NumericalError, StatsError, UsageError
from solarcast.grid import GeoGrid
from solarcast.nn.data import VARIANTS, InputStats, make_batch
from solarcast.nn.model import ModelPreset, TwoStageModel
from solarcast.nn.train import Adam, OptimizerConfig, ScheduleFreeAdam, loss_weights, train, write_trace
from solarcast.nn.autograd import Tensor
from solarcast.synth import WorldConfig, generate_episode

PRESET = ModelPreset(image=16, patch=4, window=2, embed_dim=16, heads=2, depth_enc=1, depth_dec=1, depth_stage2=1)


@pytest.fixture(scope="module")
def episode():
    return generate_episode(WorldConfig(grid=GeoGrid(33, 116, 0.05, 0.05, 16, 16), seed=1), "2025-05-02T00:00Z", 31)


@pytest.fixture(scope="module")
def stats(episode):
    return InputStats.fit([episode])


def params_of(model):
    return [p.data.copy() for p in model.parameters()]


def test_overfit_single_window(episode, stats):
    # measured ratio on this seed is about 0.004
    res = train(TwoStageModel(PRESET), [episode.window(0)], 500, OptimizerConfig(lr=1e-3), stats=stats)
    assert res.trace[-1]["total"] < 0.1 * res.trace[0]["total"]


def test_deterministic_trace(episode, stats):
    ws = episode.windows()
    cfg = OptimizerConfig(lr=1e-3, batch_size=2)
    a = train(TwoStageModel(PRESET, seed=5), ws, 6, cfg, stats=stats, seed=3)
    b = train(TwoStageModel(PRESET, seed=5), ws, 6, cfg, stats=stats, seed=3)
    assert a.trace == b.trace
    for x, y in zip(a.model.parameters(), b.model.parameters()):
        np.testing.assert_array_equal(x.data, y.data)


@pytest.mark.parametrize("schedule_free", [False, True])
def test_zero_lr_keeps_parameters(episode, stats, schedule_free):
    m = TwoStageModel(PRESET)
    before = params_of(m)
    train(m, episode.windows(), 3, OptimizerConfig(lr=0.0, schedule_free=schedule_free), stats=stats)
    for b, p in zip(before, m.parameters()):
        np.testing.assert_array_equal(b, p.data)


def test_nan_loss_aborts(episode, stats):
    m = TwoStageModel(PRESET)
    m.s2_head.proj.bias.data[:] = np.nan
    with pytest.raises(NumericalError, match="step 1"):
        train(m, episode.windows(), 2, stats=stats)


def test_needs_windows(stats):
    with pytest.raises(UsageError):
        train(TwoStageModel(PRESET), [], 1, stats=stats)


def test_adam_first_step_is_lr_sign():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.array([0.3, -0.01])
    Adam([p], OptimizerConfig(lr=0.1, grad_clip=None)).step()
    np.testing.assert_allclose(p.data, [0.9, -1.9], atol=1e-6)


def test_schedule_free_quadratic():
    p = Tensor(np.array([4.0]), requires_grad=True)
    opt = ScheduleFreeAdam([p], OptimizerConfig(lr=0.1, grad_clip=None))
    for _ in range(300):
        p.grad = 2 * p.data
        opt.step()
    opt.finalize()
    assert abs(p.data[0]) < 0.3


def test_grad_clip():
    p = Tensor(np.array([0.0, 0.0]), requires_grad=True)
    opt = Adam([p], OptimizerConfig(grad_clip=1.0))
    p.grad = np.array([30.0, 40.0])
    np.testing.assert_allclose(opt._grads()[0], [0.6, 0.8])


def test_variant_switches(episode, stats):
    ws = episode.windows()
    sat_off = make_batch(ws, stats, VARIANTS["no_satellite"])
    met_off = make_batch(ws, stats, VARIANTS["no_meteo"])
    assert not sat_off["x_sat"].any() and sat_off["x_bg"].any()
    assert not met_off["x_bg"].any() and met_off["x_sat"].any()
    assert loss_weights(VARIANTS["no_tcdc"])["tcdc"] == 0.0
    assert loss_weights(VARIANTS["only_s1"])["tcdc"] == 0.5


def test_stats_round_trip(stats, tmp_path):
    stats.save(tmp_path / "s.txt")
    back = InputStats.load(tmp_path / "s.txt")
    assert back.sat.channels == stats.sat.channels
    np.testing.assert_array_equal(back.meteo.mean, stats.meteo.mean)
    np.testing.assert_array_equal(back.sat.std, stats.sat.std)
    (tmp_path / "bad.txt").write_text("sat.B03=0.0,1.0\n")
    with pytest.raises(StatsError):
        InputStats.load(tmp_path / "bad.txt")


def test_trace_csv(tmp_path):
    write_trace([{"step": 1, "total": 1.5, "sat": 1.0, "tcdc": 0.2, "ghi": 0.4}], tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines == ["step,total,L_sat,L_TCDC,L_ghi", "1,1.5,1,0.2,0.4"]
