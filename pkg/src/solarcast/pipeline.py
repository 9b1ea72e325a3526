"""Operational cycle: six-hourly coarse meteo runs feeding hourly forecasts.

Each coarse run initialised at ``I`` carries frames valid from ``I - 6 h``
to ``I + 36 h``, enough to fill a full input window for any issue time it
can serve.  Forecasts only ever read runs with ``I <= issue - latency``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from datetime import datetime

import numpy as np

from .errors import AvailabilityError, ParameterError
from .grid import RasterStack, regrid_array
from .nn.data import VARIANTS, InputStats, make_batch
from .nn.model import ForecastBundle, TwoStageModel
from .solar import clear_sky_grid
from .synth import T_IN_SAT, Window, WorldConfig, attenuate, render_meteo, render_satellite, simulate
from .timeutil import HOUR, from_epoch, to_datetime, to_epoch

log = logging.getLogger(__name__)

RUN_HOURS = (0, 6, 12, 18)
RUN_HINDCAST = 6
RUN_HORIZON = 36
DEFAULT_LATENCY = 1.0


@dataclass(frozen=True)
class CyclePlan:
    issue: datetime
    meteo_init: datetime
    sat_window: tuple  # (first, last) satellite frame times

    def describe(self):
        return f"{self.issue:%Y-%m-%dT%H:%MZ} init={self.meteo_init:%Y-%m-%dT%HZ}"


def plan_cycle(issue, latency=DEFAULT_LATENCY, earliest=None) -> CyclePlan:
    """Latest 00/06/12/18 UTC run no later than ``issue - latency``.

    ``earliest`` is the first run held in the archive; asking for an older
    one raises :class:`AvailabilityError`.
    """
    if latency < 0:
        raise ParameterError("latency must be non-negative")
    issue = to_datetime(issue)
    cutoff = to_epoch(issue) - int(round(latency * HOUR))
    init = cutoff - cutoff % (6 * HOUR)
    if earliest is not None and init < to_epoch(earliest):
        raise AvailabilityError(f"no meteo run available for issue {issue.isoformat()} (latency {latency} h)")
    t = to_epoch(issue)
    first = from_epoch(t - (T_IN_SAT - 1) * HOUR)
    return CyclePlan(issue, from_epoch(init), (first, issue))


class MeteoArchive:
    """Coarse meteo runs keyed by initialization epoch, with an access log."""

    def __init__(self, runs: dict, fine_grid=None):
        self.runs = dict(runs)
        self.fine_grid = fine_grid
        self.access_log = []

    @property
    def earliest(self):
        return from_epoch(min(self.runs)) if self.runs else None

    def run(self, init) -> RasterStack:
        key = to_epoch(init)
        self.access_log.append(key)
        if key not in self.runs:
            raise AvailabilityError(f"meteo run {from_epoch(key).isoformat()} not in archive")
        return self.runs[key]

    def frames(self, init, valid_times):
        """Frames of one run at ``valid_times``, regridded to the fine grid."""
        run = self.run(init)
        index = {to_epoch(t): i for i, t in enumerate(run.times)}
        try:
            rows = [index[to_epoch(t)] for t in valid_times]
        except KeyError as exc:
            raise AvailabilityError(f"run {to_datetime(init).isoformat()} does not cover {from_epoch(exc.args[0])}") from None
        data = run.data[rows].astype(np.float64)
        if self.fine_grid is None:
            return data.astype(np.float32)
        return regrid_array(data, run.grid, self.fine_grid).astype(np.float32)


@dataclass
class CycleWorld:
    """Simulated truth, observations and meteo runs spanning a cycle."""

    config: WorldConfig
    times: list
    satellite: np.ndarray  # T x 4 x H x W
    cloud: np.ndarray  # T x H x W
    clearsky: np.ndarray  # T x H x W
    archive: MeteoArchive
    satellite_reads: list = field(default_factory=list)

    def index(self, t):
        return (to_epoch(t) - to_epoch(self.times[0])) // HOUR

    def satellite_frames(self, first, last):
        i, j = self.index(first), self.index(last)
        if i < 0 or j >= len(self.times):
            raise AvailabilityError("satellite window outside the simulated span")
        self.satellite_reads.append(to_epoch(last))
        return self.satellite[i : j + 1]

    def ghi_truth(self, t0, hours):
        i = self.index(t0)
        return attenuate(self.clearsky[i : i + hours], self.cloud[i : i + hours], self.config.alpha)


def build_cycle_world(config: WorldConfig, start, hours: int) -> CycleWorld:
    """Simulate enough history and future to serve ``hours`` hourly issues
    beginning at ``start``, and render every six-hourly meteo run."""
    t_start = to_epoch(start)
    span0 = t_start - (6 + RUN_HINDCAST + 12) * HOUR
    span1 = t_start + (hours + RUN_HORIZON + 6) * HOUR
    n = (span1 - span0) // HOUR + 1
    states = simulate(config, from_epoch(span0), n)
    times = [s.time for s in states]
    params = config.clear_sky_params()
    sat = np.concatenate([render_satellite(s, s.time, config).data for s in states])
    clear = np.stack([clear_sky_grid(config.grid, s.time, params).ghi for s in states])
    cloud = np.stack([s.cloud for s in states])
    runs = {}
    first_init = span0 + RUN_HINDCAST * HOUR
    first_init += (-first_init) % (6 * HOUR)
    for init in range(first_init, span1 - RUN_HORIZON * HOUR + 1, 6 * HOUR):
        lo = (init - span0) // HOUR - RUN_HINDCAST
        hi = (init - span0) // HOUR + RUN_HORIZON
        frames = [render_meteo(states[k], config, noise_key=(init, to_epoch(states[k].time))).data for k in range(lo, hi + 1)]
        runs[init] = RasterStack(config.coarse_grid, times[lo : hi + 1], config.meteo_channels, np.concatenate(frames))
    return CycleWorld(config, times, sat, cloud, clear, MeteoArchive(runs, config.grid))


@dataclass
class CycleForecast:
    plan: CyclePlan
    bundle: ForecastBundle
    truth: np.ndarray  # T_out x H x W


def cycle_window(world: CycleWorld, plan: CyclePlan, t_out=24) -> Window:
    issue = to_epoch(plan.issue)
    past = [from_epoch(issue - k * HOUR) for k in range(T_IN_SAT - 1, -1, -1)]
    future = [from_epoch(issue + k * HOUR) for k in range(1, t_out + 1)]
    x_sat = world.satellite_frames(*plan.sat_window)
    x_bg = world.archive.frames(plan.meteo_init, past + future)
    i = world.index(plan.issue)
    return Window(
        issue=plan.issue,
        x_sat=x_sat,
        x_bg=x_bg,
        clearsky=world.clearsky[i + 1 : i + 1 + t_out],
        tcdc=world.cloud[i + 1 : i + 1 + t_out, None],
        sat=world.satellite[i + 1 : i + 1 + t_out],
        ghi=world.ghi_truth(future[0], t_out)[:, None],
    )


def run_cycle(model: TwoStageModel, stats: InputStats, world: CycleWorld, start, hours: int, latency=DEFAULT_LATENCY, variant=None):
    """One forecast per hour from ``start``; each tagged with its plan."""
    variant = variant or VARIANTS["full"]
    out = []
    for k in range(hours):
        issue = from_epoch(to_epoch(start) + k * HOUR)
        plan = plan_cycle(issue, latency, earliest=world.archive.earliest)
        win = cycle_window(world, plan, model.preset.t_out)
        bundle = model.predict(make_batch([win], stats, variant))[0]
        out.append(CycleForecast(plan, bundle, win.ghi[:, 0]))
        log.debug("cycle %s", plan.describe())
    return out


def bundles_to_stack(forecasts, grid) -> RasterStack:
    """Lead-1..T_out GHI forecasts as a (issues x T_out) channel raster."""
    t_out = forecasts[0].bundle.ghi_hat.shape[0]
    data = np.stack([f.bundle.ghi_hat[:, 0] for f in forecasts]).astype(np.float32)
    return RasterStack(grid, [f.plan.issue for f in forecasts], [f"GHI+{k}" for k in range(1, t_out + 1)], data)

