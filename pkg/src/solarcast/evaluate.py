"""Forecast scoring, reference forecasters, ablations and attribution."""

from __future__ import annotations

import copy
import csv
import logging
import os
import statistics
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import AlignmentError, ConfigError, EmptyInputError, ParameterError
from .nn import autograd as ag
from .nn.autograd import Tensor
from .nn.data import VARIANTS, InputStats, make_batch
from .nn.model import GHI_SCALE, TOY_PRESET, ModelPreset, TwoStageModel, postprocess_ghi
from .nn.train import OptimizerConfig, train
from .synth import WorldConfig, attenuate, generate_dataset
from .timeutil import from_epoch, to_epoch

log = logging.getLogger(__name__)

SAMPLED_LEADS = (1, 2, 3, 6, 12, 24)


def rmse(y, y_hat) -> float:
    y = np.asarray(y, dtype=np.float64).ravel()
    y_hat = np.asarray(y_hat, dtype=np.float64).ravel()
    if y.shape != y_hat.shape:
        raise AlignmentError(f"length mismatch: {y.size} vs {y_hat.size}")
    if y.size == 0:
        raise EmptyInputError("rmse of zero samples")
    return float(np.sqrt(np.mean((y - y_hat) ** 2)))


@dataclass
class EvalReport:
    rmse_avg: float
    rmse_by_lead: np.ndarray
    rmse_by_init_hour: dict
    n: int
    table: dict = field(default_factory=dict)  # (init_hour, lead) -> rmse

    def at_lead(self, lead):
        return float(self.rmse_by_lead[lead - 1])

    def write_csv(self, path):
        rows = [(h, lead, v) for (h, lead), v in sorted(self.table.items())]
        _write_rows(path, ["init_hour", "lead", "rmse"], [(h, lead, f"{v:.6f}") for h, lead, v in rows])


def _write_rows(path, header, rows):
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        wr.writerows(rows)
    os.replace(tmp, path)


def skill_curves(forecasts, truths, init_hours, masks=None) -> EvalReport:
    """Per-lead and per-initialization-hour RMSE.

    ``forecasts`` and ``truths`` are sequences of ``(T_out, ...)`` arrays
    (or bundles exposing ``ghi_hat``).  ``masks``, when given, restricts the
    aggregation (e.g. to daylight cells).
    """
    forecasts = [getattr(f, "ghi_hat", f) for f in forecasts]
    if not (len(forecasts) == len(truths) == len(init_hours)):
        raise AlignmentError("forecasts, truths and init_hours differ in length")
    if not forecasts:
        raise EmptyInputError("no forecasts to score")
    t_out = np.shape(forecasts[0])[0]
    sq = np.zeros(t_out)
    cnt = np.zeros(t_out)
    by_hour = {}
    for i, (f, y, h) in enumerate(zip(forecasts, truths, init_hours)):
        f = np.asarray(f, dtype=np.float64).reshape(t_out, -1)
        y = np.asarray(y, dtype=np.float64)
        if y.size != f.size:
            raise AlignmentError(f"sample {i}: forecast {f.shape} vs truth {y.shape}")
        y = y.reshape(t_out, -1)
        m = np.ones_like(f, bool) if masks is None else np.asarray(masks[i]).reshape(t_out, -1)
        e = np.where(m, (f - y) ** 2, 0.0)
        s, c = e.sum(axis=1), m.sum(axis=1)
        sq += s
        cnt += c
        hs, hc = by_hour.setdefault(int(h), (np.zeros(t_out), np.zeros(t_out)))
        hs += s
        hc += c
    with np.errstate(invalid="ignore", divide="ignore"):
        by_lead = np.sqrt(sq / cnt)
        table = {}
        per_hour = {}
        for h, (hs, hc) in by_hour.items():
            per_hour[h] = float(np.sqrt(hs.sum() / hc.sum()))
            for lead in range(t_out):
                table[(h, lead + 1)] = float(np.sqrt(hs[lead] / hc[lead]))
    return EvalReport(float(np.mean(by_lead)), by_lead, per_hour, len(forecasts), table)


# -- reference forecasters ------------------------------------------------------


class MeanBaseline:
    """Historical mean GHI per cell and UTC hour of day."""

    def __init__(self, means):
        self.means = means  # 24 x H x W

    @classmethod
    def fit(cls, archive):
        """``archive`` is a sequence of GHI RasterStacks (or a single one)."""
        stacks = [archive] if hasattr(archive, "data") else list(archive)
        if not stacks or sum(len(s.times) for s in stacks) == 0:
            raise EmptyInputError("empty training archive")
        shape = stacks[0].data.shape[-2:]
        total = np.zeros((24, *shape))
        count = np.zeros(24)
        for s in stacks:
            for t, frame in zip(s.times, s.data[:, 0]):
                total[t.hour] += frame
                count[t.hour] += 1
        if np.any(count == 0):
            raise EmptyInputError("archive must cover every hour of the day at least once")
        return cls(total / count[:, None, None])

    def forecast(self, window):
        issue = to_epoch(window.issue)
        hours = [from_epoch(issue + 3600 * k).hour for k in range(1, window.ghi.shape[0] + 1)]
        return self.means[hours]


class ClearSkyBaseline:
    """Cloud-free GHI at every lead."""

    def forecast(self, window):
        return np.asarray(window.clearsky, dtype=np.float64)


class PersistenceBaseline:
    """Freeze the last satellite-derived cloud field and attenuate clear-sky."""

    def __init__(self, alpha):
        self.alpha = alpha

    def forecast(self, window, clearsky=None):
        cs = window.clearsky if clearsky is None else clearsky
        return attenuate(np.asarray(cs, dtype=np.float64), window.last_cloud[None].astype(np.float64), self.alpha)


class ModelForecaster:
    def __init__(self, model: TwoStageModel, stats: InputStats, variant=None, batch_size=4):
        self.model = model
        self.stats = stats
        self.variant = variant or VARIANTS["full"]
        self.batch_size = batch_size

    def forecast_many(self, windows):
        out = []
        for i in range(0, len(windows), self.batch_size):
            chunk = windows[i : i + self.batch_size]
            batch = make_batch(chunk, self.stats, self.variant)
            out.extend(b.ghi_hat[:, 0] for b in self.model.predict(batch))
        return out


def evaluate_forecaster(forecaster, windows) -> EvalReport:
    if hasattr(forecaster, "forecast_many"):
        preds = forecaster.forecast_many(windows)
    else:
        preds = [forecaster.forecast(w) for w in windows]
    truths = [w.ghi[:, 0] for w in windows]
    return skill_curves(preds, truths, [w.issue.hour for w in windows])


# -- ablations -------------------------------------------------------------------


@dataclass(frozen=True)
class AblationConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    preset: ModelPreset = TOY_PRESET
    optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(lr=2e-3))
    seeds: tuple = (0, 1, 2)
    variants: tuple = ("full", "no_meteo", "no_satellite", "only_s1", "no_tcdc")
    steps: int = 1500
    train_episodes: int = 96
    test_episodes: int = 4
    episode_hours: int = 53
    eval_stride: int = 2


@dataclass
class AblationResult:
    reports: dict  # variant -> list of EvalReport (one per seed)
    baselines: dict  # name -> EvalReport
    models: dict  # (variant, seed) -> TwoStageModel
    stats: InputStats
    test_windows: list
    traces: dict = field(default_factory=dict)

    def median_avg(self, variant):
        return statistics.median(r.rmse_avg for r in self.reports[variant])

    def median_at_lead(self, variant, lead):
        return statistics.median(r.at_lead(lead) for r in self.reports[variant])

    def median_curve(self, variant):
        return np.median(np.stack([r.rmse_by_lead for r in self.reports[variant]]), axis=0)

    def write_csv(self, path, leads=SAMPLED_LEADS):
        rows = []
        for name in list(self.reports) + list(self.baselines):
            if name in self.reports:
                avg, curve = self.median_avg(name), self.median_curve(name)
            else:
                rep = self.baselines[name]
                avg, curve = rep.rmse_avg, rep.rmse_by_lead
            rows.append([name, f"{avg:.6f}"] + [f"{curve[k - 1]:.6f}" for k in leads if k <= len(curve)])
        _write_rows(path, ["variant", "avg"] + [f"lead_{k}" for k in leads], rows)


def build_datasets(world: WorldConfig, train_episodes, test_episodes, hours):
    train_eps = generate_dataset(world, train_episodes, hours, "train")
    test_eps = generate_dataset(world, test_episodes, hours, "test")
    return train_eps, test_eps


def run_ablations(config: AblationConfig, progress=None) -> AblationResult:
    """Train every variant for every seed on identical data; score them all."""
    unknown = [v for v in config.variants if v not in VARIANTS]
    if unknown:
        raise ConfigError(f"unknown ablation variants {unknown}")
    train_eps, test_eps = build_datasets(config.world, config.train_episodes, config.test_episodes, config.episode_hours)
    stats = InputStats.fit(train_eps)
    train_windows = [w for e in train_eps for w in e.windows()]
    test_windows = [w for e in test_eps for w in e.windows()][:: config.eval_stride]
    reports, models, traces = {}, {}, {}
    for name in config.variants:
        variant = VARIANTS[name]
        preset = replace(config.preset, single_stage=variant.single_stage)
        for seed in config.seeds:
            model = TwoStageModel(preset, seed=seed)
            res = train(model, train_windows, config.steps, config.optimizer, stats=stats, variant=variant, seed=seed)
            rep = evaluate_forecaster(ModelForecaster(model, stats, variant), test_windows)
            reports.setdefault(name, []).append(rep)
            models[(name, seed)] = model
            traces[(name, seed)] = res.trace
            if progress:
                progress(name, seed, rep)
    baselines = {
        "clear_sky": evaluate_forecaster(ClearSkyBaseline(), test_windows),
        "mean": evaluate_forecaster(MeanBaseline.fit([e.ghi for e in train_eps]), test_windows),
        "persistence": evaluate_forecaster(PersistenceBaseline(config.world.alpha), test_windows),
    }
    return AblationResult(reports, baselines, models, stats, test_windows, traces)


# -- integrated gradients ----------------------------------------------------------


def path_nodes(steps, grading=3.0):
    """Midpoint tags and cell widths for a graded partition of [0, 1].

    Cell edges sit at ``(k / steps) ** grading``; each cell is tagged at the
    image of its midpoint in the uniform variable.  ``grading=1`` is the
    plain midpoint rule.  Widths sum to exactly 1, so linear models are
    attributed exactly for any ``steps``.
    """
    if steps < 1:
        raise ParameterError("steps must be >= 1")
    if grading < 1:
        raise ParameterError("grading must be >= 1")
    u = np.arange(steps + 1, dtype=np.float64) / steps
    edges = u**grading
    tags = ((u[:-1] + u[1:]) / 2) ** grading
    return tags, np.diff(edges)


def integrated_gradients(func, inputs, baseline=None, steps=64, grading=3.0):
    """Integrated Gradients along the straight path from ``baseline``.

    ``func(x)`` takes a dict of arrays and returns ``(value, grads)`` where
    ``grads`` maps the same keys to d value / d input.  The path integral is
    a Riemann sum over :func:`path_nodes`.  Returns
    ``(attributions, residual, delta)`` with
    ``residual = sum(attr) - (F(x) - F(b))``.
    """
    tags, widths = path_nodes(steps, grading)
    baseline = baseline or {k: np.zeros_like(v) for k, v in inputs.items()}
    total = {k: np.zeros(np.shape(v), dtype=np.float64) for k, v in inputs.items()}
    for a, wdt in zip(tags, widths):
        point = {k: baseline[k] + a * (inputs[k] - baseline[k]) for k in inputs}
        _, grads = func(point)
        for k in inputs:
            total[k] += wdt * grads[k]
    attr = {k: (inputs[k] - baseline[k]) * total[k] for k in inputs}
    fx, _ = func(inputs)
    fb, _ = func(baseline)
    residual = sum(float(v.sum()) for v in attr.values()) - (fx - fb)
    return attr, residual, fx - fb


@dataclass
class AttributionReport:
    leads: list
    satellite_share: np.ndarray
    meteo_share: np.ndarray
    residuals: list  # (sample, lead, residual, delta)
    magnitudes: dict = field(default_factory=dict)

    def max_relative_residual(self):
        worst = 0.0
        for _, _, res, delta in self.residuals:
            if delta == 0:
                if res != 0:
                    return float("inf")
                continue
            worst = max(worst, abs(res) / abs(delta))
        return worst

    def share(self, lead):
        i = self.leads.index(lead)
        return float(self.satellite_share[i]), float(self.meteo_share[i])

    def write_csv(self, path):
        rows = [(lead, f"{s:.6f}", f"{m:.6f}") for lead, s, m in zip(self.leads, self.satellite_share, self.meteo_share)]
        _write_rows(path, ["lead", "satellite_share", "meteo_share"], rows)


def _lead_objective(model, batch, lead):
    """Domain-mean raw GHI at one lead (units of ``GHI_SCALE``) as a function
    of the satellite and meteo inputs; stage 2 runs for that lead only."""
    p = model.preset

    def func(x):
        n = x["x_sat"].shape[0]
        x_sat = Tensor(x["x_sat"].astype(model.dtype), requires_grad=True)
        x_bg = Tensor(x["x_bg"].astype(model.dtype), requires_grad=True)
        tcdc, sat, ghi = model.stage1_forward(x_sat, x_bg)
        k = lead - 1
        if p.single_stage:
            out = ghi[:, k : k + 1]
        else:
            fut = x_bg[:, p.t_bg - p.t_out + k : p.t_bg - p.t_out + k + 1, list(p.stage2_channels)]
            cs = np.repeat(batch["clearsky"][:, k : k + 1], n, axis=0)
            out = model.stage2_forward(cs, fut, tcdc[:, k : k + 1], sat[:, k : k + 1])
        per_sample = ag.mean(ag.reshape(out, (n, -1)), axis=1)
        total = ag.tsum(per_sample)
        total.backward()
        return per_sample.data.astype(np.float64), {"x_sat": x_sat.grad.astype(np.float64), "x_bg": x_bg.grad.astype(np.float64)}

    return func


def _batched_ig(model, batch, lead, steps, grading):
    """IG for one sample and lead with all path points in a single batch."""
    x = {"x_sat": batch["x_sat"], "x_bg": batch["x_bg"]}
    func = _lead_objective(model, batch, lead)
    tags, widths = path_nodes(steps, grading)
    col = lambda a, v: a.reshape(-1, *([1] * (v.ndim - 1)))  # noqa: E731
    path = {k: (col(tags, v) * v).astype(model.dtype) for k, v in x.items()}
    _, grads = func(path)
    attr = {k: x[k][0].astype(np.float64) * (col(widths, grads[k]) * grads[k]).sum(axis=0) for k in x}
    ends = {k: np.concatenate([v, np.zeros_like(v)]) for k, v in x.items()}
    vals, _ = func(ends)
    delta = float(vals[0] - vals[1])
    residual = sum(float(a.sum()) for a in attr.values()) - delta
    return attr, residual, delta


def model_attribution(model, windows, stats, variant=None, leads=None, steps=64, grading=3.0) -> AttributionReport:
    """Satellite vs meteo share of absolute IG attribution per lead.

    The baseline is the all-zero input in normalized space; clear-sky input
    is held fixed.  Shares pool absolute attributions over ``windows``.
    """
    path_nodes(steps, grading)  # validates
    model = copy.deepcopy(model).astype(np.float64)
    leads = list(leads or range(1, model.preset.t_out + 1))
    mags = {lead: np.zeros(2) for lead in leads}
    residuals = []
    for i, w in enumerate(windows):
        batch = make_batch([w], stats, variant, dtype=np.float64)
        for lead in leads:
            attr, res, delta = _batched_ig(model, batch, lead, steps, grading)
            mags[lead] += [np.abs(attr["x_sat"]).sum(), np.abs(attr["x_bg"]).sum()]
            residuals.append((i, lead, res, delta))
    sat_share, met_share = [], []
    for lead in leads:
        s, m = mags[lead]
        tot = s + m
        sat_share.append(s / tot if tot > 0 else 0.5)
        met_share.append(m / tot if tot > 0 else 0.5)
    return AttributionReport(leads, np.array(sat_share), np.array(met_share), residuals, mags)
