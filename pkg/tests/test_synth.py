from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from solarcast.errors import ParameterError, RangeError
from solarcast.grid import GeoGrid, read_raster
from solarcast.solar import clear_sky_grid
from solarcast.synth import (
    Episode,
    WorldConfig,
    WorldState,
    advect_step,
    attenuate,
    generate_dataset,
    generate_episode,
    read_manifest,
    render_ghi_truth,
    render_meteo,
    render_satellite,
    simulate,
    write_manifest,
)
from solarcast.timeutil import to_datetime

SMALL = GeoGrid(33.0, 116.0, 0.05, 0.05, 16, 16)
NOON = "2025-06-21T04:00:00Z"  # local solar noon near 116E
MIDNIGHT = "2025-06-21T16:00:00Z"


def still(cloud, config):
    z = np.zeros_like(cloud)
    return WorldState(cloud, z, z, to_datetime(NOON))


def quiet(**kw):
    base = dict(grid=SMALL, cloud_birth_rate=0.0, cloud_decay_rate=0.0, meteo_noise=0.0)
    base.update(kw)
    return WorldConfig(**base)


class TestConfig:
    def test_validation(self):
        with pytest.raises(ParameterError):
            WorldConfig(grid=SMALL, coarse_factor=3)
        with pytest.raises(ParameterError):
            WorldConfig(alpha=1.5)
        with pytest.raises(ParameterError):
            WorldConfig(cloud_decay_rate=-0.1)

    def test_state_bounds(self):
        with pytest.raises(ParameterError):
            WorldState(np.full((2, 2), 1.2), np.zeros((2, 2)), np.zeros((2, 2)), to_datetime(NOON))


class TestAdvect:
    def test_identity(self):
        cfg = quiet()
        cloud = np.random.default_rng(0).uniform(size=SMALL.shape)
        out = advect_step(still(cloud, cfg), 1.0, cfg)
        np.testing.assert_array_equal(out.cloud, cloud)
        assert (out.time - to_datetime(NOON)).total_seconds() == 3600

    def test_periodic_shift_east(self):
        cfg = quiet(periodic=True)
        cloud = np.random.default_rng(1).uniform(size=SMALL.shape)
        u = np.full(SMALL.shape, SMALL.dlon)
        state = WorldState(cloud, u, np.zeros_like(u), to_datetime(NOON))
        np.testing.assert_allclose(advect_step(state, 1.0, cfg).cloud, np.roll(cloud, 1, axis=1), atol=1e-12)

    def test_periodic_shift_north(self):
        cfg = quiet(periodic=True)
        cloud = np.random.default_rng(2).uniform(size=SMALL.shape)
        v = np.full(SMALL.shape, SMALL.dlat)
        state = WorldState(cloud, np.zeros_like(v), v, to_datetime(NOON))
        np.testing.assert_allclose(advect_step(state, 1.0, cfg).cloud, np.roll(cloud, -1, axis=0), atol=1e-12)

    @pytest.mark.parametrize("rate,c0,k", [(0.1, 0.8, 5), (0.04, 0.5, 24), (0.5, 1.0, 3)])
    def test_decay_closed_form(self, rate, c0, k):
        cfg = quiet(cloud_decay_rate=rate)
        state = still(np.full(SMALL.shape, c0), cfg)
        for _ in range(k):
            state = advect_step(state, 1.0, cfg)
        np.testing.assert_allclose(state.cloud, c0 * (1 - rate) ** k, atol=1e-6)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**31), wind=st.floats(0.0, 0.5))
    def test_bounds_preserved(self, seed, wind):
        cfg = WorldConfig(grid=SMALL, seed=seed, cloud_birth_rate=1.0, blob_slots=4, wind_scale=wind)
        state = simulate(cfg, NOON, 4)[-1]
        assert 0.0 <= state.cloud.min() and state.cloud.max() <= 1.0


class TestRender:
    def test_clear_day(self):
        cfg = quiet()
        sat = render_satellite(still(np.zeros(SMALL.shape), cfg), NOON, cfg).data[0]
        assert np.all(sat[0] == 0) and np.all(sat[3] == 1)

    def test_night_visible_zero(self):
        cfg = quiet()
        cloud = np.random.default_rng(0).uniform(size=SMALL.shape)
        sat = render_satellite(still(cloud, cfg), MIDNIGHT, cfg).data[0]
        assert np.all(sat[0] == 0)
        assert np.any(sat[3] < 1)

    def test_full_cloud_saturates(self):
        cfg = quiet(vis_max=0.9)
        sat = render_satellite(still(np.ones(SMALL.shape), cfg), NOON, cfg).data[0]
        np.testing.assert_allclose(sat[0], 0.9, rtol=1e-6)

    def test_meteo_constant_and_shape(self):
        cfg = quiet()
        met = render_meteo(still(np.full(SMALL.shape, 0.3), cfg), cfg)
        assert met.data.shape == (1, 3, 4, 4)
        np.testing.assert_allclose(met.data[0, 0], 0.3, rtol=1e-6)
        big = WorldConfig(grid=GeoGrid(33, 116, 0.05, 0.05, 64, 64))
        z = np.zeros((64, 64))
        assert render_meteo(WorldState(z, z, z, to_datetime(NOON)), big).grid.shape == (16, 16)

    def test_meteo_deterministic(self):
        cfg = WorldConfig(grid=SMALL, meteo_noise=0.5)
        state = still(np.full(SMALL.shape, 0.4), cfg)
        a, b = render_meteo(state, cfg), render_meteo(state, cfg)
        assert a.equals(b)
        assert not a.equals(render_meteo(state, cfg, noise_key=(1, 2)))

    @pytest.mark.parametrize("cloud,alpha,factor", [(0.0, 0.75, 1.0), (1.0, 1.0, 0.0), (0.5, 0.8, 0.6)])
    def test_ghi_truth(self, cloud, alpha, factor):
        cfg = quiet(alpha=alpha)
        clear = clear_sky_grid(SMALL, NOON, cfg.clear_sky_params()).ghi
        ghi = render_ghi_truth(still(np.full(SMALL.shape, cloud), cfg), NOON, None, cfg).data[0, 0]
        np.testing.assert_allclose(ghi, factor * clear, rtol=1e-6, atol=1e-4)
        assert np.all(ghi <= clear + 1e-3)

    def test_ghi_night_exact_zero(self):
        cfg = quiet()
        ghi = render_ghi_truth(still(np.full(SMALL.shape, 0.2), cfg), MIDNIGHT, None, cfg).data
        assert np.all(ghi == 0)

    @given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1200))
    def test_attenuate_bounded(self, cloud, alpha, clear):
        out = attenuate(clear, cloud, alpha)
        assert 0 <= out <= clear


class TestEpisode:
    @pytest.fixture(scope="class")
    @staticmethod
    def episode():
        return generate_episode(WorldConfig(grid=SMALL, seed=3), "2025-05-02T00:00Z", 53)

    def test_window_counts(self, episode):
        assert episode.n_windows() == 24
        one = generate_episode(WorldConfig(grid=SMALL), "2025-05-02T00:00Z", 30)
        assert one.n_windows() == 1

    def test_too_short(self):
        with pytest.raises(RangeError):
            generate_episode(WorldConfig(grid=SMALL), "2025-05-02T00:00Z", 29)

    def test_window_bounds(self, episode):
        with pytest.raises(RangeError):
            episode.window(24)

    def test_window_layout(self, episode):
        w = episode.window(3)
        assert w.issue == episode.times[8]
        assert w.x_sat.shape == (6, 4, 16, 16)
        assert w.x_bg.shape == (30, 3, 16, 16)
        assert w.ghi.shape == (24, 1, 16, 16) and w.clearsky.shape == (24, 16, 16)
        np.testing.assert_array_equal(w.ghi, episode.ghi.data[9:33])
        np.testing.assert_allclose(w.last_cloud, episode.tcdc.data[8, 0], atol=1e-6)

    def test_truth_below_clear_sky(self, episode):
        assert np.all(episode.ghi.data <= episode.clearsky.data + 1e-3)
        assert np.all(episode.ghi.data[episode.clearsky.data == 0] == 0)

    def test_bit_identical(self, episode, tmp_path):
        again = generate_episode(WorldConfig(grid=SMALL, seed=3), "2025-05-02T00:00Z", 53)
        a = episode.save(tmp_path / "a", "ep")
        b = again.save(tmp_path / "b", "ep")
        for name in a:
            assert open(a[name], "rb").read() == open(b[name], "rb").read()
        back = Episode.load(tmp_path / "a", "ep", episode.config)
        assert back.ghi.equals(read_raster(a["ghi"]))

    def test_dataset_independent_of_count(self):
        cfg = WorldConfig(grid=SMALL, seed=9)
        two = generate_dataset(cfg, 2, 30)
        one = generate_dataset(cfg, 1, 30)
        assert one[0].ghi.equals(two[0].ghi)
        assert not two[0].ghi.equals(two[1].ghi)

    def test_manifest_round_trip(self, tmp_path):
        rows = [("train_0000", to_datetime("2025-01-01T05:00Z"), 53, 123)]
        write_manifest(tmp_path / "m.txt", rows)
        assert read_manifest(tmp_path / "m.txt") == rows


def test_predictability_decays_with_lead():
    # pooled over 100 episodes on the default world
    leads = range(1, 13)
    pairs = {k: ([], []) for k in leads}
    for e in range(100):
        states = simulate(replace(WorldConfig(), seed=e), "2025-06-01T00:00Z", 13)
        for k in leads:
            pairs[k][0].append(states[0].cloud.ravel())
            pairs[k][1].append(states[k].cloud.ravel())
    r = [np.corrcoef(np.concatenate(pairs[k][0]), np.concatenate(pairs[k][1]))[0, 1] for k in leads]
    assert np.all(np.diff(r) < 0), r
