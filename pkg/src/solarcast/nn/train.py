"""Optimizers and the training loop."""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericalError, UsageError
from ..rng import rng_for
from .data import VARIANTS, Variant, make_batch
from .model import LOSS_WEIGHTS, TwoStageModel, multitask_loss

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule_free: bool = False
    batch_size: int = 1
    grad_clip: float | None = 1.0


class Adam:
    """Adaptive-moment updates at a constant learning rate."""

    def __init__(self, params, cfg: OptimizerConfig):
        self.params = list(params)
        self.cfg = cfg
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def _grads(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        clip = self.cfg.grad_clip
        if clip:
            norm = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads)))
            if norm > clip:
                grads = [g * (clip / norm) for g in grads]
        return grads

    def step(self):
        c = self.cfg
        self.t += 1
        b1c = 1 - c.beta1**self.t
        b2c = 1 - c.beta2**self.t
        for p, g, m, v in zip(self.params, self._grads(), self.m, self.v):
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            p.data = (p.data - c.lr * (m / b1c) / (np.sqrt(v / b2c) + c.eps)).astype(p.data.dtype)

    def finalize(self):
        pass


class ScheduleFreeAdam(Adam):
    """Schedule-free variant: gradients at an interpolation of the fast
    iterate ``z`` and its running average ``x``; ``x`` is the model kept
    after :meth:`finalize`.
    """

    def __init__(self, params, cfg):
        super().__init__(params, cfg)
        self.z = [p.data.copy() for p in self.params]
        self.x = [p.data.copy() for p in self.params]

    def step(self):
        c = self.cfg
        self.t += 1
        b2c = 1 - c.beta2**self.t
        weight = 1.0 / self.t
        for i, (p, g) in enumerate(zip(self.params, self._grads())):
            v = self.v[i]
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            self.z[i] = self.z[i] - c.lr * g / (np.sqrt(v / b2c) + c.eps)
            # difference form keeps x == z exact when no step is taken
            self.x[i] = self.x[i] + weight * (self.z[i] - self.x[i])
            p.data = (self.z[i] + c.beta1 * (self.x[i] - self.z[i])).astype(p.data.dtype)

    def finalize(self):
        for p, x in zip(self.params, self.x):
            p.data = x.astype(p.data.dtype)


def make_optimizer(params, cfg: OptimizerConfig):
    return (ScheduleFreeAdam if cfg.schedule_free else Adam)(params, cfg)


def loss_weights(variant: Variant):
    w = dict(LOSS_WEIGHTS)
    if not variant.supervise_tcdc:
        w["tcdc"] = 0.0
    return w


@dataclass
class TrainResult:
    model: TwoStageModel
    trace: list = field(default_factory=list)


def train(model: TwoStageModel, windows, steps: int, opt_cfg: OptimizerConfig | None = None, *, stats, variant=None, seed=0, log_every=0):
    """Fit ``model`` on randomly drawn training windows.

    Returns a :class:`TrainResult` whose ``trace`` holds one dict per step
    (``step, total, sat, tcdc, ghi``).  Raises :class:`NumericalError` as
    soon as the loss stops being finite.
    """
    if not windows:
        raise UsageError("training needs at least one window")
    opt_cfg = opt_cfg or OptimizerConfig()
    variant = variant or VARIANTS["full"]
    weights = loss_weights(variant)
    rng = rng_for(seed, "batches")
    opt = make_optimizer(model.parameters(), opt_cfg)
    model.train(True)
    trace = []
    for step in range(1, steps + 1):
        idx = rng.integers(0, len(windows), size=opt_cfg.batch_size)
        batch = make_batch([windows[i] for i in idx], stats, variant)
        out = model.forward(batch)
        total, comps = multitask_loss(out, batch, weights)
        row = {"step": step, "total": total.item(), **{k: v.item() for k, v in comps.items()}}
        if not np.isfinite(row["total"]):
            raise NumericalError(f"non-finite loss at step {step}: {row}")
        model.zero_grad()
        total.backward()
        opt.step()
        trace.append(row)
        if log_every and step % log_every == 0:
            log.info("step %d loss %.5f (sat %.5f tcdc %.5f ghi %.5f)", step, row["total"], row["sat"], row["tcdc"], row["ghi"])
    opt.finalize()
    model.train(False)
    return TrainResult(model, trace)


def write_trace(trace, path):
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["step", "total", "L_sat", "L_TCDC", "L_ghi"])
        for r in trace:
            wr.writerow([r["step"], f"{r['total']:.8g}", f"{r['sat']:.8g}", f"{r['tcdc']:.8g}", f"{r['ghi']:.8g}"])
    os.replace(tmp, path)
