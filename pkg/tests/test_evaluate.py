import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from solarcast.errors import AlignmentError, ConfigError, EmptyInputError, ParameterError
from solarcast.evaluate import (
    AblationConfig,
    ClearSkyBaseline,
    MeanBaseline,
    ModelForecaster,
    PersistenceBaseline,
    evaluate_forecaster,
    integrated_gradients,
    model_attribution,
    path_nodes,
    rmse,
    run_ablations,
    skill_curves,
)
from solarcast.grid import GeoGrid, RasterStack
from solarcast.nn.data import InputStats
from solarcast.nn.model import ModelPreset, TwoStageModel
from solarcast.nn.train import OptimizerConfig
from solarcast.synth import WorldConfig, generate_dataset, generate_episode
from solarcast.timeutil import hourly

SMALL = GeoGrid(33.0, 116.0, 0.05, 0.05, 16, 16)
TINY = ModelPreset(image=16, patch=4, window=2, embed_dim=8, heads=2, depth_enc=1, depth_dec=1, depth_stage2=1)


class TestRmse:
    def test_examples(self):
        assert rmse([1, 2, 3], [1, 2, 3]) == 0.0
        assert rmse([0, 0], [3, 4]) == pytest.approx(3.5355339, abs=1e-6)
        assert rmse(np.zeros(10), np.full(10, -2.5)) == pytest.approx(2.5)

    def test_errors(self):
        with pytest.raises(EmptyInputError):
            rmse([], [])
        with pytest.raises(AlignmentError):
            rmse([1, 2], [1])

    @given(
        a=hnp.arrays(np.float64, 6, elements=st.integers(-1000, 1000).map(float)),
        b=hnp.arrays(np.float64, 6, elements=st.integers(-1000, 1000).map(float)),
    )
    def test_metric(self, a, b):
        d = rmse(a, b)
        assert d >= 0
        assert d == rmse(b, a)
        assert (d == 0) == np.array_equal(a, b)


class TestSkillCurves:
    def test_perfect(self):
        y = [np.random.default_rng(i).uniform(size=(24, 4)) for i in range(3)]
        rep = skill_curves(y, y, [0, 6, 6])
        assert rep.rmse_avg == 0 and np.all(rep.rmse_by_lead == 0)
        assert set(rep.rmse_by_init_hour) == {0, 6}

    def test_avg_is_mean_of_leads(self):
        r = np.random.default_rng(0)
        f = [r.normal(size=(5, 3)) for _ in range(4)]
        y = [r.normal(size=(5, 3)) for _ in range(4)]
        rep = skill_curves(f, y, [1, 2, 3, 4])
        assert rep.rmse_avg == pytest.approx(np.mean(rep.rmse_by_lead))
        assert rep.rmse_by_lead[2] == pytest.approx(rmse(np.stack(y)[:, 2], np.stack(f)[:, 2]))
        assert rep.at_lead(3) == rep.rmse_by_lead[2]

    def test_night_leads_zero(self):
        y = np.zeros((3, 4))
        y[0] = 100.0
        f = y.copy()
        f[0] += 10
        rep = skill_curves([f], [y], [0])
        np.testing.assert_array_equal(rep.rmse_by_lead, [10.0, 0.0, 0.0])

    def test_mask(self):
        f, y = np.array([[1.0, 50.0]]), np.array([[0.0, 0.0]])
        rep = skill_curves([f], [y], [0], masks=[np.array([[True, False]])])
        assert rep.rmse_avg == 1.0

    def test_misaligned(self):
        with pytest.raises(AlignmentError):
            skill_curves([np.zeros((2, 2))], [np.zeros((2, 3))], [0])
        with pytest.raises(AlignmentError):
            skill_curves([np.zeros((2, 2))], [], [0])
        with pytest.raises(EmptyInputError):
            skill_curves([], [], [])

    def test_csv(self, tmp_path):
        rep = skill_curves([np.ones((2, 1))], [np.zeros((2, 1))], [5])
        rep.write_csv(tmp_path / "s.csv")
        rows = list(csv.reader(open(tmp_path / "s.csv")))
        assert rows == [["init_hour", "lead", "rmse"], ["5", "1", "1.000000"], ["5", "2", "1.000000"]]


def ghi_stack(values_by_hour, start="2025-03-01T00:00Z"):
    data = np.asarray(values_by_hour, np.float32).reshape(-1, 1, 1, 1) * np.ones((1, 1, 2, 2), np.float32)
    return RasterStack(GeoGrid(0, 0, 1, 1, 2, 2), hourly(start, len(data)), ["GHI"], data)


class TestMeanBaseline:
    def test_constant(self):
        b = MeanBaseline.fit(ghi_stack([7.0] * 24))
        assert np.all(b.means == 7.0)

    def test_two_days(self):
        a = np.arange(48, dtype=float)
        b = MeanBaseline.fit(ghi_stack(a))
        assert b.means[10, 0, 0] == pytest.approx((a[10] + a[34]) / 2)

    def test_memorizes_one_day(self):
        ep = generate_episode(WorldConfig(grid=SMALL, seed=2), "2025-04-01T00:00Z", 30)
        g = ep.ghi
        base = MeanBaseline.fit(RasterStack(g.grid, g.times[:24], g.channels, g.data[:24]))
        w = ep.window(0)  # issue 05:00, leads cover 06:00..05:00 next day
        day = g.data[:24, 0]
        np.testing.assert_array_equal(base.forecast(w), np.roll(day, -6, axis=0))
        assert rmse(base.forecast(w)[:18], day[6:]) == 0.0

    def test_empty(self):
        with pytest.raises(EmptyInputError):
            MeanBaseline.fit([])
        with pytest.raises(EmptyInputError):
            MeanBaseline.fit(ghi_stack([1.0] * 5))


class TestBaselines:
    @pytest.fixture(scope="class")
    @staticmethod
    def static_episode():
        cfg = WorldConfig(grid=SMALL, seed=4, wind_scale=0.0, cloud_birth_rate=0.0, cloud_decay_rate=0.0, initial_blobs=6)
        return generate_episode(cfg, "2025-07-01T00:00Z", 40)

    def test_clear_sky_cloud_free(self):
        cfg = WorldConfig(grid=SMALL, initial_blobs=0, cloud_birth_rate=0.0)
        ep = generate_episode(cfg, "2025-07-01T00:00Z", 30)
        assert evaluate_forecaster(ClearSkyBaseline(), ep.windows()).rmse_avg == 0.0

    def test_clear_sky_overcast(self, static_episode):
        rep = evaluate_forecaster(ClearSkyBaseline(), static_episode.windows())
        assert rep.rmse_avg > 0

    def test_persistence_static(self, static_episode):
        rep = evaluate_forecaster(PersistenceBaseline(static_episode.config.alpha), static_episode.windows())
        assert rep.rmse_by_lead.max() < 1e-3

    def test_persistence_lead_zero(self):
        ep = generate_episode(WorldConfig(grid=SMALL, seed=6), "2025-07-01T00:00Z", 30)
        w = ep.window(0)
        t = 5
        now = PersistenceBaseline(ep.config.alpha).forecast(w, clearsky=ep.clearsky.data[t : t + 1, 0])
        assert rmse(ep.ghi.data[t, 0], now) < 1e-3

    def test_night_leads_contribute_zero(self):
        ep = generate_episode(WorldConfig(grid=SMALL, seed=8), "2025-07-01T00:00Z", 30)
        w = ep.window(0)
        night = w.clearsky.reshape(24, -1).max(axis=1) == 0
        assert night.any()
        for b in (ClearSkyBaseline(), PersistenceBaseline(ep.config.alpha)):
            rep = skill_curves([b.forecast(w)], [w.ghi[:, 0]], [0])
            assert np.all(rep.rmse_by_lead[night] == 0)

    @pytest.mark.slow
    def test_persistence_degrades_with_lead(self):
        cfg = WorldConfig(grid=SMALL, seed=11)
        windows = [w for e in generate_dataset(cfg, 100, 53) for w in e.windows()]
        curve = evaluate_forecaster(PersistenceBaseline(cfg.alpha), windows).rmse_by_lead
        assert np.all(np.diff(curve) >= 0), curve


class TestIntegratedGradients:
    def test_linear_exact(self):
        w = {"a": np.array([1.0, -2.0, 0.5]), "b": np.array([[3.0]])}

        def f(x):
            return sum(float((w[k] * x[k]).sum()) for k in w), dict(w)

        x = {"a": np.array([2.0, 1.0, -4.0]), "b": np.array([[0.5]])}
        for steps in (1, 7, 64):
            attr, res, delta = integrated_gradients(f, x, steps=steps)
            for k in w:
                np.testing.assert_allclose(attr[k], w[k] * x[k])
            assert abs(res) < 1e-12 and delta == pytest.approx(0.0 + 2 - 2 - 2 + 1.5)

    def test_constant_model(self):
        f = lambda x: (3.0, {k: np.zeros_like(v) for k, v in x.items()})  # noqa: E731
        attr, res, delta = integrated_gradients(f, {"a": np.ones(4)}, steps=16)
        assert np.all(attr["a"] == 0) and res == 0 and delta == 0

    def test_quadratic_completeness(self):
        def f(x):
            return float((x["a"] ** 2).sum()), {"a": 2 * x["a"]}

        x = {"a": np.array([1.0, -3.0, 2.0])}
        _, res, delta = integrated_gradients(f, x, steps=64)
        assert abs(res) <= 0.01 * abs(delta)

    @pytest.mark.parametrize("grading", [1.0, 3.0])
    def test_linear_exact_any_grading(self, grading):
        w = np.array([0.5, -1.5])
        f = lambda x: (float(w @ x["a"]), {"a": w})  # noqa: E731
        attr, res, _ = integrated_gradients(f, {"a": np.array([4.0, 2.0])}, {"a": np.array([1.0, 1.0])}, steps=3, grading=grading)
        np.testing.assert_allclose(attr["a"], w * [3.0, 1.0])
        assert abs(res) < 1e-12

    def test_path_nodes(self):
        tags, widths = path_nodes(4, 1.0)
        np.testing.assert_allclose(tags, [0.125, 0.375, 0.625, 0.875])
        np.testing.assert_allclose(widths, 0.25)
        tags, widths = path_nodes(64, 3.0)
        assert widths.sum() == pytest.approx(1.0, abs=1e-15)
        assert np.all(np.diff(tags) > 0) and tags[0] > 0 and tags[-1] < 1
        assert tags[0] == pytest.approx((0.5 / 64) ** 3)

    def test_steps_validation(self):
        with pytest.raises(ParameterError):
            integrated_gradients(lambda x: (0.0, x), {"a": np.ones(1)}, steps=0)
        with pytest.raises(ParameterError):
            path_nodes(8, 0.5)


@pytest.fixture(scope="module")
def tiny_world():
    cfg = WorldConfig(grid=SMALL, seed=21)
    eps = generate_dataset(cfg, 2, 30)
    return eps, InputStats.fit(eps)


class TestModelAttribution:
    def test_shares_and_completeness(self, tiny_world):
        eps, stats = tiny_world
        m = TwoStageModel(TINY, seed=1)
        r = np.random.default_rng(0)
        for p in m.parameters():
            p.data = p.data + r.normal(scale=0.05, size=p.shape).astype(np.float32)
        rep = model_attribution(m, [e.window(0) for e in eps], stats, leads=[1, 24], steps=64)
        np.testing.assert_allclose(rep.satellite_share + rep.meteo_share, 1.0, atol=1e-6)
        assert rep.max_relative_residual() <= 0.01
        assert len(rep.residuals) == 4
        # the input model is left in single precision
        assert m.dtype == np.float32

    def test_steps_validation(self, tiny_world):
        eps, stats = tiny_world
        with pytest.raises(ParameterError):
            model_attribution(TwoStageModel(TINY), [eps[0].window(0)], stats, steps=0)


class TestAblations:
    def config(self, **kw):
        base = dict(
            world=WorldConfig(grid=SMALL, seed=5),
            preset=TINY,
            optimizer=OptimizerConfig(lr=1e-3),
            seeds=(0, 1),
            variants=("full", "no_meteo", "only_s1"),
            steps=2,
            train_episodes=2,
            test_episodes=1,
            episode_hours=31,
        )
        base.update(kw)
        return AblationConfig(**base)

    def test_deterministic(self, tmp_path):
        a = run_ablations(self.config())
        b = run_ablations(self.config())
        a.write_csv(tmp_path / "a.csv")
        b.write_csv(tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        rows = list(csv.reader(open(tmp_path / "a.csv")))
        assert rows[0] == ["variant", "avg", "lead_1", "lead_2", "lead_3", "lead_6", "lead_12", "lead_24"]
        assert [r[0] for r in rows[1:]] == ["full", "no_meteo", "only_s1", "clear_sky", "mean", "persistence"]
        assert a.traces[("full", 0)] == b.traces[("full", 0)]

    def test_same_samples_for_every_variant(self):
        res = run_ablations(self.config(seeds=(0,)))
        ns = {name: reps[0].n for name, reps in res.reports.items()}
        assert len(set(ns.values())) == 1 and ns["full"] == len(res.test_windows)
        assert res.median_avg("full") == res.reports["full"][0].rmse_avg

    def test_unknown_variant(self):
        with pytest.raises(ConfigError):
            run_ablations(self.config(variants=("full", "bogus")))


def test_model_forecaster_matches_predict(tiny_world):
    eps, stats = tiny_world
    m = TwoStageModel(TINY)
    ws = eps[0].windows()
    a = ModelForecaster(m, stats, batch_size=1).forecast_many(ws)
    assert len(a) == 1 and a[0].shape == (24, 16, 16)
    assert np.all(a[0][ws[0].clearsky == 0] == 0)
