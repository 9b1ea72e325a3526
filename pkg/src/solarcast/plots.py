"""Report figures written next to the CSV outputs."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no timestamps or version strings, so reruns produce identical bytes
_PNG_META = {"Software": None}


def _save(fig, path):
    tmp = f"{path}.tmp.png"
    fig.savefig(tmp, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    os.replace(tmp, path)
    return path


def plot_skill_curves(curves: dict, path, title="GHI RMSE by lead time"):
    """``curves`` maps a label to per-lead RMSE values."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, values in curves.items():
        values = np.asarray(values)
        ax.plot(np.arange(1, len(values) + 1), values, marker="o", ms=3, label=label)
    ax.set_xlabel("lead time (h)")
    ax.set_ylabel("RMSE (W m$^{-2}$)")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_ablation(avgs: dict, path):
    names = list(avgs)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(names, [avgs[n] for n in names], color="tab:blue")
    ax.set_ylabel("average RMSE (W m$^{-2}$)")
    ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    return _save(fig, path)


def plot_attribution(leads, satellite_share, path):
    leads = np.asarray(leads)
    sat = np.asarray(satellite_share)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(leads, sat, label="satellite", color="tab:orange")
    ax.bar(leads, 1 - sat, bottom=sat, label="meteo", color="tab:blue")
    ax.set_xlabel("lead time (h)")
    ax.set_ylabel("attribution share")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_field(values, extent, path, title="", label="W m$^{-2}$"):
    """Map of one gridded field; ``extent`` is (south, north, west, east)."""
    s, n, w, e = extent
    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(np.asarray(values), origin="upper", extent=(w, e, s, n), cmap="magma")
    fig.colorbar(im, ax=ax, label=label)
    ax.set_xlabel("longitude")
    ax.set_ylabel("latitude")
    ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)
