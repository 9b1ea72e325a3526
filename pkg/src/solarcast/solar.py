"""Solar geometry and Ineichen-Perez clear-sky GHI.

Two paths compute the same quantities:

* scalar functions (``solar_zenith``, ``clear_sky_ghi_scalar``) built on
  :mod:`math`, used one cell at a time;
* :func:`clear_sky_grid`, which evaluates a whole raster with numpy
  broadcasting in one pass.

The scalar path doubles as the reference for the vectorized one, and
:func:`clear_sky_grid_naive` is the per-cell loop the fast path is timed
against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import datetime

import numpy as np

from .errors import ParameterError, RangeError, ShapeError
from .timeutil import to_datetime

SOLAR_CONSTANT = 1367.7
NIGHT_EPS = 1e-4
# Night sentinel returned by air_mass(); NaN never compares >= 1 so it
# cannot be confused with a real air mass.
AIR_MASS_NIGHT = float("nan")

MIN_YEAR = 1901
MAX_YEAR = 2099

DEFAULT_LINKE = 3.0
# Air mass fed to the irradiance formula is capped here.  Beyond roughly
# AM 11.5 the exp(+0.01 AM^1.8) factor outgrows the attenuation term for
# T_L = 1 and the formula rises again towards the horizon (and overflows).
IRRADIANCE_AM_CAP = 11.0


@dataclass(frozen=True)
class ClearSkyParams:
    """Inputs of the clear-sky model besides geometry.

    ``elevation_m`` and ``linke_turbidity`` may be scalars or arrays shaped
    like the target grid.  ``air_mass_model`` is ``"secant"`` (plain 1/cos z)
    or ``"kasten_young"``.
    """

    elevation_m: float | np.ndarray = 0.0
    linke_turbidity: float | np.ndarray = DEFAULT_LINKE
    timestamp: datetime | None = None
    air_mass_model: str = "secant"

    def __post_init__(self):
        h = np.asarray(self.elevation_m, dtype=np.float64)
        tl = np.asarray(self.linke_turbidity, dtype=np.float64)
        if not np.all(np.isfinite(h)):
            raise ParameterError("elevation_m must be finite")
        if not np.all(np.isfinite(tl)) or np.any(tl < 1.0):
            raise ParameterError("linke_turbidity must be finite and >= 1")
        if self.air_mass_model not in ("secant", "kasten_young"):
            raise ParameterError(f"unknown air_mass_model {self.air_mass_model!r}")


@dataclass(frozen=True)
class SolarGeometry:
    zenith_deg: np.ndarray
    cos_zenith: np.ndarray
    day_of_year: int
    air_mass: np.ndarray


@dataclass(frozen=True)
class ClearSkyField:
    """Clear-sky GHI over a raster plus the intermediate terms.

    ``ghi`` is kept in double precision; :meth:`to_stack` casts to the
    single-precision raster representation.
    """

    ghi: np.ndarray
    i0: float
    cos_zenith: np.ndarray
    coeffs: dict = field(default_factory=dict)
    timestamp: datetime | None = None

    def to_stack(self, grid):
        from .grid import RasterStack

        data = self.ghi.astype(np.float32)[None, None]
        return RasterStack(grid, [self.timestamp], ["GHI_CLEAR"], data)


def _check_year(dt):
    if not MIN_YEAR <= dt.year <= MAX_YEAR:
        raise RangeError(f"timestamp {dt.isoformat()} outside supported years {MIN_YEAR}-{MAX_YEAR}")


def day_of_year(timestamp) -> int:
    dt = to_datetime(timestamp)
    _check_year(dt)
    return dt.timetuple().tm_yday


def extraterrestrial_irradiance(doy):
    """Top-of-atmosphere normal irradiance in W m-2 for day of year ``doy``."""
    d = np.asarray(doy)
    if np.any(d < 1) or np.any(d > 366):
        raise RangeError(f"day of year {doy} outside 1..366")
    out = SOLAR_CONSTANT * (1.0 + 0.033 * np.cos(2.0 * np.pi * d / 365.0))
    return float(out) if out.ndim == 0 else out


def elevation_coeffs(h):
    """Elevation-dependent Ineichen-Perez coefficients ``(c_g1, c_g2, f_h1, f_h2)``."""
    if np.ndim(h) == 0:
        h = float(h)
        return (5.09e-5 * h + 0.868, 3.92e-5 * h + 0.0387, math.exp(-h / 8000.0), math.exp(-h / 1250.0))
    h = np.asarray(h, dtype=np.float64)
    return (5.09e-5 * h + 0.868, 3.92e-5 * h + 0.0387, np.exp(-h / 8000.0), np.exp(-h / 1250.0))


def _days_in_year(year):
    return 366 if (year % 4 == 0 and (year % 100 != 0 or year % 400 == 0)) else 365


def _sun_terms(dt):
    """Declination (rad) and equation of time (minutes) for a UTC instant.

    Spencer-type Fourier series in the fractional year.
    """
    doy = dt.timetuple().tm_yday
    hour = dt.hour + dt.minute / 60.0 + (dt.second + dt.microsecond * 1e-6) / 3600.0
    g = 2.0 * math.pi / _days_in_year(dt.year) * (doy - 1 + (hour - 12.0) / 24.0)
    decl = (
        0.006918
        - 0.399912 * math.cos(g)
        + 0.070257 * math.sin(g)
        - 0.006758 * math.cos(2 * g)
        + 0.000907 * math.sin(2 * g)
        - 0.002697 * math.cos(3 * g)
        + 0.00148 * math.sin(3 * g)
    )
    eot = 229.18 * (
        0.000075
        + 0.001868 * math.cos(g)
        - 0.032077 * math.sin(g)
        - 0.014615 * math.cos(2 * g)
        - 0.040849 * math.sin(2 * g)
    )
    return decl, eot, hour


def _normalize_lon(lon):
    return ((lon + 180.0) % 360.0) - 180.0


def solar_zenith(lat, lon, timestamp) -> float:
    """Solar zenith angle in degrees at one location."""
    if not -90.0 <= lat <= 90.0:
        raise RangeError(f"latitude {lat} outside [-90, 90]")
    if not -180.0 <= lon <= 360.0:
        raise RangeError(f"longitude {lon} outside [-180, 360]")
    dt = to_datetime(timestamp)
    _check_year(dt)
    decl, eot, hour = _sun_terms(dt)
    lon = _normalize_lon(lon)
    true_solar_min = hour * 60.0 + eot + 4.0 * lon
    ha = math.radians(true_solar_min / 4.0 - 180.0)
    phi = math.radians(lat)
    cz = math.sin(phi) * math.sin(decl) + math.cos(phi) * math.cos(decl) * math.cos(ha)
    return math.degrees(math.acos(min(1.0, max(-1.0, cz))))


def air_mass(cos_zenith, model="secant"):
    """Relative air mass, or :data:`AIR_MASS_NIGHT` when ``cos_zenith <= NIGHT_EPS``.

    ``model="secant"`` returns 1/cos z. ``model="kasten_young"`` uses the
    Kasten & Young (1989) fit.
    """
    if np.ndim(cos_zenith) == 0:
        cz = float(cos_zenith)
        if cz <= NIGHT_EPS:
            return AIR_MASS_NIGHT
        if model == "kasten_young":
            z = math.degrees(math.acos(min(1.0, cz)))
            return 1.0 / (cz + 0.50572 * (96.07995 - z) ** -1.6364)
        return 1.0 / cz
    cz = np.asarray(cos_zenith, dtype=np.float64)
    day = cz > NIGHT_EPS
    safe = np.where(day, cz, 1.0)
    if model == "kasten_young":
        z = np.degrees(np.arccos(np.minimum(safe, 1.0)))
        am = 1.0 / (safe + 0.50572 * (96.07995 - z) ** -1.6364)
    else:
        am = 1.0 / safe
    return np.where(day, am, AIR_MASS_NIGHT)


def _ineichen(cz, am, i0, h, tl):
    am = np.minimum(am, IRRADIANCE_AM_CAP)
    cg1, cg2, fh1, fh2 = elevation_coeffs(h)
    return cg1 * i0 * cz * np.exp(-cg2 * am * (fh1 + fh2 * (tl - 1.0))) * np.exp(0.01 * am**1.8)


def clear_sky_ghi_scalar(z, params: ClearSkyParams, doy) -> float:
    """Clear-sky GHI (W m-2) for zenith ``z`` in degrees at a single cell."""
    tl = float(params.linke_turbidity)
    if tl < 1.0:
        raise ParameterError("linke_turbidity must be >= 1")
    return _cell_ghi(z, float(params.elevation_m), tl, extraterrestrial_irradiance(doy), params.air_mass_model)


def _cell_ghi(z, h, tl, i0, model):
    cz = math.cos(math.radians(z))
    if cz <= NIGHT_EPS:
        return 0.0
    am = min(air_mass(cz, model), IRRADIANCE_AM_CAP)
    cg1, cg2, fh1, fh2 = elevation_coeffs(h)
    ghi = cg1 * i0 * cz * math.exp(-cg2 * am * (fh1 + fh2 * (tl - 1.0))) * math.exp(0.01 * am**1.8)
    return max(ghi, 0.0)


def grid_cos_zenith(grid, timestamp):
    """Vectorized cos(zenith) on every cell center of ``grid`` (H x W)."""
    dt = to_datetime(timestamp)
    _check_year(dt)
    decl, eot, hour = _sun_terms(dt)
    phi = np.radians(grid.lats())[:, None]
    lon = _normalize_lon(grid.lons())[None, :]
    ha = np.radians((hour * 60.0 + eot + 4.0 * lon) / 4.0 - 180.0)
    cz = np.sin(phi) * math.sin(decl) + np.cos(phi) * math.cos(decl) * np.cos(ha)
    return np.clip(cz, -1.0, 1.0)


def _cell_param(value, shape, name):
    a = np.asarray(value, dtype=np.float64)
    if a.ndim == 0:
        return a
    if a.shape != shape:
        raise ShapeError(f"{name} raster shape {a.shape} does not match grid {shape}")
    return a


def clear_sky_grid(grid, timestamp, params: ClearSkyParams | None = None, bands: int = 1) -> ClearSkyField:
    """Clear-sky GHI over every cell of ``grid`` at ``timestamp``.

    ``bands`` splits the evaluation into independent row bands; the result is
    bit-identical for any value.
    """
    params = params or ClearSkyParams()
    shape = (grid.height, grid.width)
    h = _cell_param(params.elevation_m, shape, "elevation")
    tl = _cell_param(params.linke_turbidity, shape, "linke_turbidity")
    dt = to_datetime(timestamp)
    doy = day_of_year(dt)
    i0 = extraterrestrial_irradiance(doy)
    cz = grid_cos_zenith(grid, dt)
    ghi = np.empty(shape, dtype=np.float64)
    edges = np.linspace(0, grid.height, max(1, int(bands)) + 1).astype(int)
    for r0, r1 in zip(edges[:-1], edges[1:]):
        sl = slice(r0, r1)
        czb = cz[sl]
        day = czb > NIGHT_EPS
        am = air_mass(np.where(day, czb, 1.0), params.air_mass_model)
        hb = h if h.ndim == 0 else h[sl]
        tb = tl if tl.ndim == 0 else tl[sl]
        val = _ineichen(czb, am, i0, hb, tb)
        ghi[sl] = np.where(day, np.maximum(val, 0.0), 0.0)
    coeffs = dict(zip(("c_g1", "c_g2", "f_h1", "f_h2"), elevation_coeffs(h)))
    return ClearSkyField(ghi=ghi, i0=i0, cos_zenith=cz, coeffs=coeffs, timestamp=dt)


def clear_sky_grid_naive(grid, timestamp, params: ClearSkyParams | None = None) -> np.ndarray:
    """Per-cell loop over :func:`solar_zenith` and :func:`clear_sky_ghi_scalar`."""
    params = params or ClearSkyParams()
    shape = (grid.height, grid.width)
    h = np.broadcast_to(np.asarray(params.elevation_m, dtype=np.float64), shape)
    tl = np.broadcast_to(np.asarray(params.linke_turbidity, dtype=np.float64), shape)
    dt = to_datetime(timestamp)
    i0 = extraterrestrial_irradiance(day_of_year(dt))
    lats, lons = grid.lats(), grid.lons()
    out = np.empty(shape, dtype=np.float64)
    for i in range(shape[0]):
        for j in range(shape[1]):
            z = solar_zenith(float(lats[i]), float(lons[j]), dt)
            out[i, j] = _cell_ghi(z, float(h[i, j]), float(tl[i, j]), i0, params.air_mass_model)
    return out


def solar_geometry(grid, timestamp, model="secant") -> SolarGeometry:
    cz = grid_cos_zenith(grid, timestamp)
    return SolarGeometry(
        zenith_deg=np.degrees(np.arccos(cz)),
        cos_zenith=cz,
        day_of_year=day_of_year(timestamp),
        air_mass=air_mass(cz, model),
    )


def clear_sky_series(grid, times, params: ClearSkyParams | None = None) -> np.ndarray:
    """Stack of clear-sky GHI rasters, shape (T, H, W), double precision."""
    return np.stack([clear_sky_grid(grid, t, params).ghi for t in times])
