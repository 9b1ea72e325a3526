"""Window batching, input normalization and modality ablation switches."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from ..errors import StatsError
from ..grid import NormStats, fit_norm_stats


@dataclass(frozen=True)
class Variant:
    """One row of the ablation matrix."""

    name: str
    zero_sat: bool = False
    zero_meteo: bool = False
    single_stage: bool = False
    supervise_tcdc: bool = True


VARIANTS = {
    "full": Variant("full"),
    "no_meteo": Variant("no_meteo", zero_meteo=True),
    "no_satellite": Variant("no_satellite", zero_sat=True),
    "only_s1": Variant("only_s1", single_stage=True),
    "no_tcdc": Variant("no_tcdc", single_stage=True, supervise_tcdc=False),
}


@dataclass(frozen=True)
class InputStats:
    sat: NormStats
    meteo: NormStats

    @classmethod
    def fit(cls, episodes):
        return cls(
            sat=fit_norm_stats([e.satellite for e in episodes]),
            meteo=fit_norm_stats([e.meteo for e in episodes]),
        )

    def save(self, path):
        lines = []
        for group, st in (("sat", self.sat), ("meteo", self.meteo)):
            for c, m, s in zip(st.channels, st.mean, st.std):
                lines.append(f"{group}.{c}={float(m)!r},{float(s)!r}\n")
        tmp = f"{path}.tmp"
        with open(tmp, "w") as fh:
            fh.writelines(lines)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path):
        groups = {"sat": [], "meteo": []}
        with open(path) as fh:
            for line in fh:
                if "=" not in line:
                    continue
                key, val = line.strip().split("=", 1)
                group, chan = key.split(".", 1)
                m, s = (float(x) for x in val.split(","))
                groups[group].append((chan, m, s))
        if not groups["sat"] or not groups["meteo"]:
            raise StatsError(f"{path}: missing satellite or meteo statistics")
        mk = lambda rows: NormStats(tuple(r[0] for r in rows), np.array([r[1] for r in rows]), np.array([r[2] for r in rows]))  # noqa: E731
        return cls(mk(groups["sat"]), mk(groups["meteo"]))


def _norm(x, stats: NormStats, axis):
    shape = [1] * x.ndim
    shape[axis] = -1
    return ((x - stats.mean.reshape(shape)) / stats.std.reshape(shape)).astype(np.float32)


def make_batch(windows, stats: InputStats, variant: Variant | None = None, dtype=np.float32):
    """Stack windows into model-ready arrays.

    Inputs are normalized per channel; a zeroed modality is all-zero in
    normalized space.  Targets stay in physical units.
    """
    variant = variant or VARIANTS["full"]
    x_sat = np.stack([_norm(w.x_sat, stats.sat, 1) for w in windows])
    x_bg = np.stack([_norm(w.x_bg, stats.meteo, 1) for w in windows])
    if variant.zero_sat:
        x_sat = np.zeros_like(x_sat)
    if variant.zero_meteo:
        x_bg = np.zeros_like(x_bg)
    return {
        "x_sat": x_sat.astype(dtype),
        "x_bg": x_bg.astype(dtype),
        "clearsky": np.stack([w.clearsky for w in windows]).astype(np.float64),
        "tcdc": np.stack([w.tcdc for w in windows]).astype(dtype),
        "sat": np.stack([w.sat for w in windows]).astype(dtype),
        "ghi": np.stack([w.ghi for w in windows]).astype(np.float64),
    }
