"""Command-line entry point: ``solarcast <command> [--key value ...]``.

Every command resolves a flat key=value configuration (defaults, then an
optional ``--config`` file, then ``--key value`` flags), stores it in the
run directory and writes its artifacts below that directory.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import dataclass, fields, replace
from datetime import datetime, timezone

import numpy as np

from . import evaluate as ev
from . import plots
from .errors import AvailabilityError, ConfigError, FormatError, NumericalError, SolarcastError
from .grid import GeoGrid, RasterStack, write_raster
from .nn.data import VARIANTS, InputStats
from .nn.model import TOY_PRESET, TwoStageModel, load_checkpoint, save_checkpoint
from .nn.model import read_manifest as read_checkpoint_manifest
from .nn.train import OptimizerConfig, train, write_trace
from .pipeline import build_cycle_world, bundles_to_stack, run_cycle
from .rng import derive_seed
from .solar import ClearSkyParams, clear_sky_grid
from .synth import Episode, WorldConfig, episode_starts, generate_episode, hash_label, read_manifest, write_manifest
from .timeutil import hourly

log = logging.getLogger("solarcast")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
FORECASTERS = ("model", "clearsky", "persistence", "mean", "truth")


@dataclass(frozen=True)
class RunConfig:
    name: str = "run"
    seed: int = 0
    runs_root: str = "runs"
    # grid and world
    lat0: float = 33.0
    lon0: float = 116.0
    dlat: float = 0.05
    dlon: float = 0.05
    height: int = 32
    width: int = 32
    coarse_factor: int = 4
    wind_scale: float = 0.05
    cloud_birth_rate: float = 0.2
    cloud_decay_rate: float = 0.04
    alpha: float = 0.75
    linke_turbidity: float = 3.0
    elevation: float = 0.0
    meteo_noise: float = 0.3
    # clear-sky product
    start: str = "2025-06-01T00:00:00Z"
    hours: int = 24
    # data
    train_episodes: int = 96
    test_episodes: int = 4
    episode_hours: int = 53
    shards: str = ""
    # model and training
    embed_dim: int = 32
    patch: int = 4
    window: int = 4
    heads: int = 2
    variant: str = "full"
    steps: int = 1500
    lr: float = 2e-3
    batch_size: int = 1
    schedule_free: bool = False
    checkpoint: str = ""
    # evaluation
    forecaster: str = "model"
    eval_stride: int = 2
    day_only: bool = False
    ig_steps: int = 64
    ig_samples: int = 4
    ig_leads: str = ""
    seeds: str = "0,1,2"
    # operational cycle
    latency: float = 1.0
    cycle_hours: int = 48
    cycle_start: str = "2025-07-01T00:00:00Z"

    def __post_init__(self):
        self.variant_obj()
        if self.forecaster not in FORECASTERS:
            raise ConfigError(f"unknown forecaster {self.forecaster!r}; choose from {', '.join(FORECASTERS)}")

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]

    def dumps(self):
        return "".join(f"{f.name}={_render(getattr(self, f.name))}\n" for f in fields(self))

    def world(self) -> WorldConfig:
        grid = GeoGrid(self.lat0, self.lon0, self.dlat, self.dlon, self.height, self.width)
        return WorldConfig(
            grid=grid,
            coarse_factor=self.coarse_factor,
            seed=derive_seed(self.seed, "world"),
            wind_scale=self.wind_scale,
            cloud_birth_rate=self.cloud_birth_rate,
            cloud_decay_rate=self.cloud_decay_rate,
            alpha=self.alpha,
            linke_turbidity=self.linke_turbidity,
            meteo_noise=self.meteo_noise,
        )

    def preset(self):
        if self.height != self.width:
            raise ConfigError("the model needs a square grid (height == width)")
        return replace(
            TOY_PRESET,
            image=self.height,
            embed_dim=self.embed_dim,
            patch=self.patch,
            window=self.window,
            heads=self.heads,
            single_stage=self.variant_obj().single_stage,
        )

    def variant_obj(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {sorted(VARIANTS)}")
        return VARIANTS[self.variant]

    def optimizer(self):
        return OptimizerConfig(lr=self.lr, batch_size=self.batch_size, schedule_free=self.schedule_free)

    def seed_list(self):
        try:
            return tuple(int(s) for s in self.seeds.split(",") if s.strip())
        except ValueError:
            raise ConfigError(f"seeds must be comma-separated integers, got {self.seeds!r}") from None


def _render(v):
    return str(v).lower() if isinstance(v, bool) else str(v)


def _coerce(key, raw):
    default = RunConfig.__dataclass_fields__[key].default
    try:
        if isinstance(default, bool):
            low = str(raw).lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return low in ("true", "1", "yes")
        return type(default)(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_config_text(text):
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in RunConfig.__dataclass_fields__:
            raise ConfigError(f"line {n}: unknown config key {key!r}")
        out[key] = _coerce(key, val)
    return out


def resolve_config(path=None, overrides=None) -> RunConfig:
    values = {}
    if path:
        with open(path) as fh:
            values.update(parse_config_text(fh.read()))
    for key, raw in (overrides or {}).items():
        if key not in RunConfig.__dataclass_fields__:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, raw)
    return RunConfig(**values)


# -- run directories ----------------------------------------------------------------


class RunDir:
    def __init__(self, root):
        self.root = root
        for sub in ("shards", "checkpoints", "reports"):
            os.makedirs(os.path.join(root, sub), exist_ok=True)

    def path(self, *parts):
        return os.path.join(self.root, *parts)

    @classmethod
    def create(cls, cfg: RunConfig, run_dir=None, command=""):
        if not run_dir:
            stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
            run_dir = os.path.join(cfg.runs_root, f"{stamp}-{cfg.name}")
        rd = cls(run_dir)
        text = cfg.dumps()
        main = rd.path("config.txt")
        if os.path.exists(main):
            with open(main) as fh:
                same = fh.read() == text
            target = main if same else rd.path(f"config.{command}.txt")
        else:
            target = main
        _write_text(target, text)
        return rd


def _write_text(path, text):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _write_csv(path, header, rows):
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        wr.writerows(rows)
    os.replace(tmp, path)


# -- shared loaders -------------------------------------------------------------------


def _shard_dir(cfg, rd):
    return cfg.shards or rd.path("shards")


def load_split(cfg: RunConfig, rd: RunDir, split):
    d = _shard_dir(cfg, rd)
    manifest = os.path.join(d, "manifest.txt")
    if not os.path.exists(manifest):
        raise FileNotFoundError(f"no shard manifest at {manifest}; run `solarcast synth` first")
    world = cfg.world()
    eps = []
    for stem, _start, _hours, seed in read_manifest(manifest):
        if stem.startswith(f"{split}_"):
            eps.append(Episode.load(d, stem, replace(world, seed=seed)))
    if not eps:
        raise FileNotFoundError(f"no {split} shards listed in {manifest}")
    return eps


def _checkpoint_dir(cfg, rd):
    return cfg.checkpoint or rd.path("checkpoints", "final")


def load_model(cfg, rd):
    d = _checkpoint_dir(cfg, rd)
    if not os.path.exists(os.path.join(d, "params.bin")):
        raise FileNotFoundError(f"no checkpoint at {d}; run `solarcast train` first")
    return load_checkpoint(d), InputStats.load(os.path.join(d, "stats.txt"))


def _test_windows(cfg, rd):
    eps = load_split(cfg, rd, "test")
    return eps, [w for e in eps for w in e.windows()][:: max(1, cfg.eval_stride)]


# -- commands -------------------------------------------------------------------------


def cmd_clearsky(cfg: RunConfig, rd: RunDir):
    world = cfg.world()
    params = ClearSkyParams(cfg.elevation, cfg.linke_turbidity)
    times = hourly(cfg.start, cfg.hours)
    data = np.stack([clear_sky_grid(world.grid, t, params).ghi for t in times])[:, None]
    stack = RasterStack(world.grid, times, ["GHI_CLEAR"], data)
    out = rd.path("shards", "clearsky.bgsr")
    nbytes = write_raster(stack, out)
    peak = int(np.argmax(data.reshape(len(times), -1).mean(axis=1)))
    plots.plot_field(data[peak, 0], world.grid.extent(), rd.path("reports", "clearsky.png"), title=f"clear-sky GHI {times[peak]:%Y-%m-%d %H:%M}Z")
    return f"clearsky: {len(times)} x {world.grid.height}x{world.grid.width} -> {out} ({nbytes} bytes)"


def cmd_synth(cfg: RunConfig, rd: RunDir):
    world = cfg.world()
    d = _shard_dir(cfg, rd)
    rows = []
    for split, n in (("train", cfg.train_episodes), ("test", cfg.test_episodes)):
        starts = episode_starts(hash_label(world.seed, split), n)
        for k, start in enumerate(starts):
            seed = hash_label(world.seed, split, k)
            ep = generate_episode(replace(world, seed=seed), start, cfg.episode_hours)
            stem = f"{split}_{k:04d}"
            ep.save(d, stem)
            rows.append((stem, start, cfg.episode_hours, seed))
    write_manifest(os.path.join(d, "manifest.txt"), rows)
    return f"synth: {cfg.train_episodes} train + {cfg.test_episodes} test episodes of {cfg.episode_hours} h -> {d}"


def cmd_train(cfg: RunConfig, rd: RunDir):
    eps = load_split(cfg, rd, "train")
    stats = InputStats.fit(eps)
    windows = [w for e in eps for w in e.windows()]
    model = TwoStageModel(cfg.preset(), seed=cfg.seed)
    res = train(model, windows, cfg.steps, cfg.optimizer(), stats=stats, variant=cfg.variant_obj(), seed=cfg.seed, log_every=max(1, cfg.steps // 10))
    d = _checkpoint_dir(cfg, rd)
    save_checkpoint(model, d, step=cfg.steps, extra={"variant": cfg.variant})
    stats.save(os.path.join(d, "stats.txt"))
    write_trace(res.trace, rd.path("reports", "train_trace.csv"))
    last = res.trace[-1]["total"] if res.trace else float("nan")
    return f"train: {cfg.steps} steps, final loss {last:.5f} -> {d}"


def _forecaster(cfg, rd, train_eps=None):
    kind = cfg.forecaster
    if kind == "model":
        model, stats = load_model(cfg, rd)
        variant = VARIANTS[read_variant(cfg, rd)]
        return ev.ModelForecaster(model, stats, variant)
    if kind == "clearsky":
        return ev.ClearSkyBaseline()
    if kind == "persistence":
        return ev.PersistenceBaseline(cfg.alpha)
    if kind == "mean":
        return ev.MeanBaseline.fit([e.ghi for e in train_eps or load_split(cfg, rd, "train")])
    if kind == "truth":
        return _Truth()
    raise ConfigError(f"unknown forecaster {kind!r} (model, clearsky, persistence, mean, truth)")


def read_variant(cfg, rd):
    return read_checkpoint_manifest(_checkpoint_dir(cfg, rd)).get("variant", "full")


class _Truth:
    """Oracle forecaster returning the verifying truth (perfect forecasts)."""

    def forecast(self, window):
        return window.ghi[:, 0].astype(np.float64)


def _predict(forecaster, windows):
    if hasattr(forecaster, "forecast_many"):
        return forecaster.forecast_many(windows)
    return [forecaster.forecast(w) for w in windows]


def cmd_forecast(cfg: RunConfig, rd: RunDir):
    eps = load_split(cfg, rd, "test")
    fc = _forecaster(cfg, rd)
    out_dir = rd.path("shards", "forecasts")
    os.makedirs(out_dir, exist_ok=True)
    n = 0
    for k, ep in enumerate(eps):
        wins = ep.windows()
        preds = np.stack(_predict(fc, wins)).astype(np.float32)
        t_out = preds.shape[1]
        stack = RasterStack(ep.config.grid, [w.issue for w in wins], [f"GHI+{j}" for j in range(1, t_out + 1)], preds)
        write_raster(stack, os.path.join(out_dir, f"test_{k:04d}.forecast.bgsr"))
        n += len(wins)
    return f"forecast: {n} forecasts ({cfg.forecaster}) -> {out_dir}"


def _day_masks(windows):
    return [w.clearsky > 0 for w in windows]


def cmd_eval(cfg: RunConfig, rd: RunDir):
    _, windows = _test_windows(cfg, rd)
    fc = _forecaster(cfg, rd)
    preds = _predict(fc, windows)
    truths = [w.ghi[:, 0] for w in windows]
    masks = _day_masks(windows) if cfg.day_only else None
    rep = ev.skill_curves(preds, truths, [w.issue.hour for w in windows], masks)
    rep.write_csv(rd.path("reports", f"skill_{cfg.forecaster}.csv"))
    curves = {cfg.forecaster: rep.rmse_by_lead}
    if cfg.forecaster == "model":
        for name, b in (("clearsky", ev.ClearSkyBaseline()), ("persistence", ev.PersistenceBaseline(cfg.alpha))):
            r = ev.skill_curves(_predict(b, windows), truths, [w.issue.hour for w in windows], masks)
            r.write_csv(rd.path("reports", f"skill_{name}.csv"))
            curves[name] = r.rmse_by_lead
    _write_csv(
        rd.path("reports", "skill_summary.csv"),
        ["forecaster", "avg"] + [f"lead_{k}" for k in ev.SAMPLED_LEADS],
        [[k, f"{np.mean(v):.6f}"] + [f"{v[j - 1]:.6f}" for j in ev.SAMPLED_LEADS if j <= len(v)] for k, v in curves.items()],
    )
    plots.plot_skill_curves(curves, rd.path("reports", "skill.png"))
    return f"eval: {rep.n} windows, avg RMSE {rep.rmse_avg:.3f} W/m2 ({cfg.forecaster})"


def cmd_attribute(cfg: RunConfig, rd: RunDir):
    _, windows = _test_windows(cfg, rd)
    model, stats = load_model(cfg, rd)
    variant = VARIANTS[read_variant(cfg, rd)]
    day = [w for w in windows if w.clearsky.max() > 0] or windows
    step = max(1, len(day) // max(1, cfg.ig_samples))
    sample = day[::step][: cfg.ig_samples]
    leads = [int(x) for x in cfg.ig_leads.split(",") if x.strip()] or None
    rep = ev.model_attribution(model, sample, stats, variant, leads=leads, steps=cfg.ig_steps)
    rep.write_csv(rd.path("reports", "attribution.csv"))
    plots.plot_attribution(rep.leads, rep.satellite_share, rd.path("reports", "attribution.png"))
    s1, _ = rep.share(rep.leads[0])
    sl, _ = rep.share(rep.leads[-1])
    return f"attribute: {len(sample)} samples, satellite share {s1:.3f} (lead {rep.leads[0]}) -> {sl:.3f} (lead {rep.leads[-1]}), max residual {rep.max_relative_residual():.2e}"


def cmd_cycle(cfg: RunConfig, rd: RunDir):
    model, stats = load_model(cfg, rd)
    variant = VARIANTS[read_variant(cfg, rd)]
    world = replace(cfg.world(), seed=derive_seed(cfg.seed, "cycle"))
    cw = build_cycle_world(world, cfg.cycle_start, cfg.cycle_hours)
    out = run_cycle(model, stats, cw, cfg.cycle_start, cfg.cycle_hours, cfg.latency, variant)
    write_raster(bundles_to_stack(out, world.grid), rd.path("shards", "cycle_forecasts.bgsr"))
    rows = []
    for f in out:
        err = ev.rmse(f.truth, f.bundle.ghi_hat[:, 0])
        rows.append([f"{f.plan.issue:%Y-%m-%dT%H:%M:%SZ}", f"{f.plan.meteo_init:%Y-%m-%dT%H:%M:%SZ}", f"{f.plan.sat_window[0]:%Y-%m-%dT%H:%M:%SZ}", f"{f.plan.sat_window[1]:%Y-%m-%dT%H:%M:%SZ}", f"{err:.6f}"])
    _write_csv(rd.path("reports", "cycle.csv"), ["issue", "meteo_init", "sat_first", "sat_last", "rmse"], rows)
    rep = ev.skill_curves([f.bundle.ghi_hat[:, 0] for f in out], [f.truth for f in out], [f.plan.issue.hour for f in out])
    plots.plot_skill_curves({"cycle": rep.rmse_by_lead}, rd.path("reports", "cycle_skill.png"), title="operational cycle RMSE")
    return f"cycle: {len(out)} hourly forecasts, latency {cfg.latency} h, avg RMSE {rep.rmse_avg:.3f} W/m2"


def cmd_ablate(cfg: RunConfig, rd: RunDir):
    acfg = ev.AblationConfig(
        world=cfg.world(),
        preset=cfg.preset(),
        optimizer=cfg.optimizer(),
        seeds=cfg.seed_list(),
        steps=cfg.steps,
        train_episodes=cfg.train_episodes,
        test_episodes=cfg.test_episodes,
        episode_hours=cfg.episode_hours,
        eval_stride=cfg.eval_stride,
    )
    res = ev.run_ablations(acfg, progress=lambda v, s, r: log.info("%s seed %d: avg %.3f", v, s, r.rmse_avg))
    res.write_csv(rd.path("reports", "ablation.csv"))
    avgs = {v: res.median_avg(v) for v in res.reports}
    avgs.update({b: r.rmse_avg for b, r in res.baselines.items()})
    plots.plot_ablation(avgs, rd.path("reports", "ablation.png"))
    curves = {v: res.median_curve(v) for v in res.reports}
    curves.update({b: r.rmse_by_lead for b, r in res.baselines.items()})
    plots.plot_skill_curves(curves, rd.path("reports", "ablation_curves.png"), title="ablation: median RMSE by lead")
    return "ablate: " + ", ".join(f"{k} {v:.2f}" for k, v in avgs.items())


COMMANDS = {
    "clearsky": (cmd_clearsky, "clear-sky GHI raster for an hourly span"),
    "synth": (cmd_synth, "generate synthetic training and test shards"),
    "train": (cmd_train, "train the forecaster on synthetic shards"),
    "forecast": (cmd_forecast, "write GHI forecasts for the test shards"),
    "eval": (cmd_eval, "score forecasts by lead time and init hour"),
    "attribute": (cmd_attribute, "integrated-gradients modality attribution"),
    "cycle": (cmd_cycle, "simulate the hourly operational cycle"),
    "ablate": (cmd_ablate, "train and score the ablation matrix"),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="solarcast", description="Two-stage solar irradiance nowcasting toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key=value configuration file")
        p.add_argument("--run-dir", help="explicit run directory (default runs/<timestamp>-<name>)")
        p.add_argument("-v", "--verbose", action="store_true")
        for key in RunConfig.keys():
            p.add_argument(f"--{key.replace('_', '-')}", dest=f"cfg_{key}", default=None, metavar="VALUE")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    try:
        cfg = resolve_config(args.config, overrides)
        rd = RunDir.create(cfg, args.run_dir, args.command)
        summary = COMMANDS[args.command][0](cfg, rd)
    except NumericalError as exc:
        print(f"solarcast: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, FormatError, AvailabilityError, OSError) as exc:
        print(f"solarcast: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (SolarcastError, ValueError) as exc:
        print(f"solarcast: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(f"{summary} [{rd.root}]")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
