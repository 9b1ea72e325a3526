"""Synthetic cloud-advection world.

A smooth wind field carries an optical-depth proxy ``cloud`` in [0, 1]
across a fine lat/lon grid.  Clouds are born as Gaussian blobs and decay
exponentially, so the field is only partly predictable by extrapolation.
From each state the world renders pseudo-satellite bands, block-averaged
noisy meteorology on a coarse grid, total cloud cover and surface GHI.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from datetime import datetime

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ParameterError, RangeError
from .grid import GeoGrid, RasterStack, read_raster, regrid_array, write_raster
from .rng import derive_seed, rng_for
from .solar import NIGHT_EPS, ClearSkyParams, clear_sky_grid, grid_cos_zenith
from .timeutil import HOUR, from_epoch, hourly, to_datetime, to_epoch

T_IN_SAT = 6
T_BG = 30
WINDOW_HOURS = T_IN_SAT + 24

SAT_CHANNELS = ["B03", "B07", "B10", "B14"]


def default_grid():
    return GeoGrid(lat0=33.0, lon0=116.0, dlat=0.05, dlon=0.05, height=32, width=32)


@dataclass(frozen=True)
class WorldConfig:
    grid: GeoGrid = field(default_factory=default_grid)
    coarse_factor: int = 4
    horizon: int = 24
    seed: int = 0
    wind_scale: float = 0.05
    cloud_birth_rate: float = 0.2
    cloud_decay_rate: float = 0.04
    alpha: float = 0.75
    linke_turbidity: float = 3.0
    meteo_noise: float = 0.3
    blob_slots: int = 2
    blob_sigma: tuple = (1.5, 3.0)
    blob_amplitude: tuple = (0.4, 1.0)
    initial_blobs: int = 4
    spinup_hours: int = 12
    vis_max: float = 1.0
    blur_radii: tuple = (1.0, 3.0)
    extra_meteo_channels: int = 0
    periodic: bool = False

    def __post_init__(self):
        if self.coarse_factor < 1 or self.grid.height % self.coarse_factor or self.grid.width % self.coarse_factor:
            raise ParameterError("coarse_factor must divide the grid height and width")
        if not 0.0 <= self.alpha <= 1.0:
            raise ParameterError("alpha must lie in [0, 1]")
        for name in ("cloud_birth_rate", "cloud_decay_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ParameterError(f"{name} must lie in [0, 1]")

    @property
    def coarse_grid(self) -> GeoGrid:
        return self.grid.coarsen(self.coarse_factor)

    @property
    def meteo_channels(self):
        return ["TCC", "U", "V"] + [f"X{k + 1}" for k in range(self.extra_meteo_channels)]

    def clear_sky_params(self):
        return ClearSkyParams(linke_turbidity=self.linke_turbidity)


@dataclass(frozen=True, eq=False)
class WorldState:
    cloud: np.ndarray
    wind_u: np.ndarray
    wind_v: np.ndarray
    time: datetime

    def __post_init__(self):
        if np.any(self.cloud < 0) or np.any(self.cloud > 1):
            raise ParameterError("cloud field must lie in [0, 1]")


def _sample_bilinear(field_, rows, cols, periodic):
    h, w = field_.shape
    if periodic:
        rows = np.mod(rows, h)
        cols = np.mod(cols, w)
    else:
        rows = np.clip(rows, 0, h - 1)
        cols = np.clip(cols, 0, w - 1)
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    fr = rows - r0
    fc = cols - c0
    if periodic:
        r0 %= h
        c0 %= w
        r1 = (r0 + 1) % h
        c1 = (c0 + 1) % w
    else:
        r1 = np.minimum(r0 + 1, h - 1)
        c1 = np.minimum(c0 + 1, w - 1)
    top = field_[r0, c0] * (1 - fc) + field_[r0, c1] * fc
    bot = field_[r1, c0] * (1 - fc) + field_[r1, c1] * fc
    return top * (1 - fr) + bot * fr


def _blobs(shape, n, rng, sigma_range, amp_range):
    h, w = shape
    out = np.zeros(shape)
    rr, cc = np.mgrid[0:h, 0:w]
    for _ in range(n):
        r, c = rng.uniform(0, h), rng.uniform(0, w)
        s = rng.uniform(*sigma_range)
        a = rng.uniform(*amp_range)
        out += a * np.exp(-((rr - r) ** 2 + (cc - c) ** 2) / (2 * s * s))
    return out


def advect_step(state: WorldState, dt: float, config: WorldConfig, rng=None) -> WorldState:
    """Advance the cloud field by ``dt`` hours.

    Semi-Lagrangian backtrace with bilinear sampling, then blob birth and
    exponential decay.  Without ``rng`` the birth draws come from a
    generator keyed on the seed and the state's time.
    """
    g = config.grid
    h, w = g.shape
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    # rows increase southward, so northward wind moves features to lower rows
    src_r = rr + state.wind_v * dt / g.dlat
    src_c = cc - state.wind_u * dt / g.dlon
    cloud = _sample_bilinear(state.cloud, src_r, src_c, config.periodic)
    if config.cloud_birth_rate > 0:
        if rng is None:
            rng = rng_for(config.seed, "birth", to_epoch(state.time))
        n = int(rng.binomial(config.blob_slots, min(1.0, config.cloud_birth_rate * dt)))
        if n:
            cloud = cloud + _blobs(g.shape, n, rng, config.blob_sigma, config.blob_amplitude)
    if config.cloud_decay_rate > 0:
        cloud = cloud * (1.0 - config.cloud_decay_rate) ** dt
    cloud = np.clip(cloud, 0.0, 1.0)
    new_time = from_epoch(to_epoch(state.time) + int(round(dt * HOUR)))
    return WorldState(cloud, state.wind_u, state.wind_v, new_time)


def wind_field(config: WorldConfig, time, rng_seed=None):
    """Smooth, slowly rotating wind (degrees per hour) for a given instant."""
    seed = config.seed if rng_seed is None else rng_seed
    p = rng_for(seed, "wind").uniform(size=6)
    theta0 = 2 * np.pi * p[0]
    omega = (p[1] - 0.5) * 0.06
    speed = config.wind_scale * (0.6 + 0.8 * p[2])
    hours = (to_epoch(time) - to_epoch("2000-01-01T00:00:00Z")) / HOUR
    theta = theta0 + omega * (hours % 100000)
    h, w = config.grid.shape
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    wobble = 0.25 * np.sin(2 * np.pi * (rr / h + p[3])) * np.cos(2 * np.pi * (cc / w + p[4]))
    u = speed * (np.cos(theta) + wobble)
    v = speed * (np.sin(theta) - wobble)
    return u, v


def initial_state(config: WorldConfig, time) -> WorldState:
    rng = rng_for(config.seed, "init")
    cloud = np.clip(_blobs(config.grid.shape, config.initial_blobs, rng, config.blob_sigma, config.blob_amplitude), 0, 1)
    u, v = wind_field(config, time)
    return WorldState(cloud, u, v, to_datetime(time))


def render_satellite(state: WorldState, timestamp, config: WorldConfig) -> RasterStack:
    """Four pseudo-bands: visible, two water-vapour proxies, thermal."""
    cz = grid_cos_zenith(config.grid, timestamp)
    day = (cz > NIGHT_EPS).astype(np.float64)
    c = state.cloud
    mode = "wrap" if config.periodic else "nearest"
    bands = [
        config.vis_max * c * day,
        gaussian_filter(c, config.blur_radii[0], mode=mode),
        gaussian_filter(c, config.blur_radii[1], mode=mode),
        1.0 - c,
    ]
    return RasterStack(config.grid, [timestamp], SAT_CHANNELS, np.stack(bands)[None])


def _block_mean(a, f):
    h, w = a.shape
    return a.reshape(h // f, f, w // f, f).mean(axis=(1, 3))


def render_meteo(state: WorldState, config: WorldConfig, noise_key=None) -> RasterStack:
    """Coarse, noisy TCC/U/V (plus optional extras) for one instant.

    ``noise_key`` selects the noise realization; by default it is derived
    from the state's time so repeated renders agree.
    """
    f = config.coarse_factor
    key = to_epoch(state.time) if noise_key is None else noise_key
    rng = rng_for(config.seed, "meteo", *np.atleast_1d(key).tolist())
    tcc = _block_mean(state.cloud, f)
    u = _block_mean(state.wind_u, f)
    v = _block_mean(state.wind_v, f)
    sigma = config.meteo_noise
    if sigma > 0:
        tcc = np.clip(tcc + rng.normal(0, sigma, tcc.shape), 0, 1)
        u = u + rng.normal(0, sigma * config.wind_scale, u.shape)
        v = v + rng.normal(0, sigma * config.wind_scale, v.shape)
    chans = [tcc, u, v]
    for k in range(config.extra_meteo_channels):
        extra = gaussian_filter(tcc, 1.0 + k, mode="nearest")
        if sigma > 0:
            extra = extra + rng.normal(0, sigma, extra.shape)
        chans.append(extra)
    return RasterStack(config.coarse_grid, [state.time], config.meteo_channels, np.stack(chans)[None])


def attenuate(clear, cloud, alpha):
    """Surface GHI under cloud: clear-sky scaled by (1 - alpha * cloud)."""
    return clear * (1.0 - alpha * cloud)


def render_ghi_truth(state: WorldState, timestamp, params: ClearSkyParams | None, config: WorldConfig) -> RasterStack:
    params = params or config.clear_sky_params()
    clear = clear_sky_grid(config.grid, timestamp, params).ghi
    ghi = attenuate(clear, state.cloud, config.alpha)
    return RasterStack(config.grid, [timestamp], ["GHI"], ghi[None, None])


@dataclass(frozen=True, eq=False)
class Episode:
    """Aligned hourly stacks for one simulated stretch of time."""

    config: WorldConfig
    satellite: RasterStack
    meteo: RasterStack
    tcdc: RasterStack
    ghi: RasterStack
    clearsky: RasterStack

    @property
    def hours(self):
        return len(self.satellite.times)

    @property
    def times(self):
        return self.satellite.times

    def n_windows(self):
        return max(0, self.hours - WINDOW_HOURS + 1)

    def meteo_fine(self):
        """Coarse meteorology bilinearly regridded to the fine grid (cached)."""
        cached = getattr(self, "_meteo_fine", None)
        if cached is None:
            cached = regrid_array(self.meteo.data.astype(np.float64), self.meteo.grid, self.config.grid).astype(np.float32)
            object.__setattr__(self, "_meteo_fine", cached)
        return cached

    def window(self, k: int) -> "Window":
        """Training/evaluation window issued at hour index ``k + 5``."""
        if not 0 <= k < self.n_windows():
            raise RangeError(f"window index {k} outside 0..{self.n_windows() - 1}")
        t = k + T_IN_SAT - 1
        fut = slice(t + 1, t + 1 + 24)
        return Window(
            issue=self.times[t],
            x_sat=self.satellite.data[t - 5 : t + 1],
            x_bg=self.meteo_fine()[t - 5 : t + 25],
            clearsky=self.clearsky.data[fut, 0],
            tcdc=self.tcdc.data[fut],
            sat=self.satellite.data[fut],
            ghi=self.ghi.data[fut],
        )

    def windows(self):
        return [self.window(k) for k in range(self.n_windows())]

    def save(self, directory, stem):
        os.makedirs(directory, exist_ok=True)
        paths = {}
        for name in ("satellite", "meteo", "tcdc", "ghi", "clearsky"):
            path = os.path.join(directory, f"{stem}.{name}.bgsr")
            write_raster(getattr(self, name), path)
            paths[name] = path
        return paths

    @classmethod
    def load(cls, directory, stem, config: WorldConfig):
        parts = {n: read_raster(os.path.join(directory, f"{stem}.{n}.bgsr")) for n in ("satellite", "meteo", "tcdc", "ghi", "clearsky")}
        return cls(config, **parts)


@dataclass(frozen=True, eq=False)
class Window:
    issue: datetime
    x_sat: np.ndarray  # 6 x 4 x H x W
    x_bg: np.ndarray  # 30 x C x H x W on the fine grid
    clearsky: np.ndarray  # 24 x H x W
    tcdc: np.ndarray  # 24 x 1 x H x W
    sat: np.ndarray  # 24 x 4 x H x W
    ghi: np.ndarray  # 24 x 1 x H x W

    @property
    def last_cloud(self):
        """Cloud field recovered from the last thermal frame."""
        return 1.0 - self.x_sat[-1, SAT_CHANNELS.index("B14")]


def simulate(config: WorldConfig, start, hours: int):
    """List of ``hours`` hourly world states beginning at ``start``."""
    t0 = to_epoch(start) - config.spinup_hours * HOUR
    state = initial_state(config, from_epoch(t0))
    for _ in range(config.spinup_hours):
        state = _step_with_wind(state, config)
    states = [state]
    for _ in range(hours - 1):
        state = _step_with_wind(state, config)
        states.append(state)
    return states


def _step_with_wind(state, config):
    nxt = advect_step(state, 1.0, config)
    u, v = wind_field(config, nxt.time)
    return WorldState(nxt.cloud, u, v, nxt.time)


def generate_episode(config: WorldConfig, start, hours: int) -> Episode:
    if hours < WINDOW_HOURS:
        raise RangeError(f"an episode needs at least {WINDOW_HOURS} hours, got {hours}")
    start = to_datetime(start)
    states = simulate(config, start, hours)
    times = hourly(start, hours)
    params = config.clear_sky_params()
    sat = np.concatenate([render_satellite(s, t, config).data for s, t in zip(states, times)])
    met = np.concatenate([render_meteo(s, config).data for s in states])
    clear = np.stack([clear_sky_grid(config.grid, t, params).ghi for t in times])[:, None]
    cloud = np.stack([s.cloud for s in states])[:, None]
    ghi = attenuate(clear, cloud, config.alpha)
    g, cg = config.grid, config.coarse_grid
    return Episode(
        config=config,
        satellite=RasterStack(g, times, SAT_CHANNELS, sat),
        meteo=RasterStack(cg, times, config.meteo_channels, met),
        tcdc=RasterStack(g, times, ["TCDC"], cloud),
        ghi=RasterStack(g, times, ["GHI"], ghi),
        clearsky=RasterStack(g, times, ["GHI_CLEAR"], clear),
    )


def episode_starts(seed: int, n: int, year: int = 2025):
    """``n`` pseudo-random hourly start instants spread over ``year``."""
    base = to_epoch(f"{year}-01-01T00:00:00Z")
    out = []
    # one stream per index, so the first k starts do not depend on n
    for k in range(n):
        d, h = rng_for(seed, "starts", k).integers(0, [330, 24])
        out.append(from_epoch(base + int(d) * 86400 + int(h) * HOUR))
    return out


def generate_dataset(config: WorldConfig, n_episodes: int, hours: int, split: str = "train"):
    """Episodes with independent per-episode seeds derived from ``config.seed``."""
    out = []
    starts = episode_starts(hash_label(config.seed, split), n_episodes)
    for k, start in enumerate(starts):
        cfg = replace(config, seed=hash_label(config.seed, split, k))
        out.append(generate_episode(cfg, start, hours))
    return out


def hash_label(*parts):
    return derive_seed(*parts)


def write_manifest(path, rows):
    """Plain-text manifest, one ``path start_epoch hours seed`` line per shard."""
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        for p, start, hours, seed in rows:
            fh.write(f"{p} {to_epoch(start)} {hours} {seed}\n")
    os.replace(tmp, path)


def read_manifest(path):
    rows = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                p, start, hours, seed = line.split()
                rows.append((p, from_epoch(int(start)), int(hours), int(seed)))
    return rows
