"""Lat/lon raster data model, regridding and the BGSR binary format.

All coordinates name cell centers.  Rows run north to south, columns west
to east, so a grid is fully described by the center of its north-west cell
and two positive spacings.
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field
from datetime import datetime

import numpy as np

from .errors import CoverageError, FormatError, ShapeError, StatsError
from .timeutil import HOUR, from_epoch, to_datetime, to_epoch

MAGIC = b"BGSR"
VERSION = 1
HEADER = struct.Struct("<4sI4I4dqI")
NAME_BYTES = 16
MISSING = -9999.0
STD_FLOOR = 1e-6
PRESSURE_LEVELS = (50, 250, 500, 600, 700, 850, 925)

assert HEADER.size == 68


@dataclass(frozen=True)
class GeoGrid:
    lat0: float
    lon0: float
    dlat: float
    dlon: float
    height: int
    width: int

    def __post_init__(self):
        if not (self.dlat > 0 and self.dlon > 0):
            raise ShapeError("grid spacings must be positive")
        if self.height < 1 or self.width < 1:
            raise ShapeError("grid must have at least one row and column")
        south = self.lat0 - (self.height - 1) * self.dlat
        east = self.lon0 + (self.width - 1) * self.dlon
        if self.lat0 > 90 or south < -90 or self.lon0 < -180 or east > 360:
            raise ShapeError("cell centers fall outside [-90, 90] x [-180, 360]")

    @property
    def shape(self):
        return (self.height, self.width)

    def lats(self):
        return self.lat0 - self.dlat * np.arange(self.height, dtype=np.float64)

    def lons(self):
        return self.lon0 + self.dlon * np.arange(self.width, dtype=np.float64)

    def extent(self):
        """Cell-edge bounds ``(south, north, west, east)``."""
        return (
            self.lat0 - (self.height - 0.5) * self.dlat,
            self.lat0 + 0.5 * self.dlat,
            self.lon0 - 0.5 * self.dlon,
            self.lon0 + (self.width - 0.5) * self.dlon,
        )

    def coarsen(self, factor: int) -> "GeoGrid":
        if self.height % factor or self.width % factor:
            raise ShapeError(f"factor {factor} does not divide {self.shape}")
        s, n, w, _ = self.extent()
        dlat, dlon = self.dlat * factor, self.dlon * factor
        return GeoGrid(n - dlat / 2, w + dlon / 2, dlat, dlon, self.height // factor, self.width // factor)

    @classmethod
    def from_extent(cls, south, north, west, east, dlat, dlon):
        h = int(round((north - south) / dlat))
        w = int(round((east - west) / dlon))
        return cls(north - dlat / 2, west + dlon / 2, dlat, dlon, h, w)


@dataclass(frozen=True)
class ChannelSchema:
    name: str
    kind: str
    level: int | None = None

    def __post_init__(self):
        if self.kind not in ("satellite-band", "single-level", "pressure-level"):
            raise ValueError(f"unknown channel kind {self.kind!r}")
        if self.kind == "pressure-level" and self.level not in PRESSURE_LEVELS:
            raise ValueError(f"pressure level {self.level} not in {PRESSURE_LEVELS}")

    @property
    def label(self):
        return f"{self.name}{self.level}" if self.level is not None else self.name


SATELLITE_BANDS = tuple(ChannelSchema(b, "satellite-band") for b in ("B03", "B07", "B10", "B14"))


def stage1_schema():
    """Default stage-1 meteorological channels (39).

    The tabulated variable list gives 41 channels; geopotential at 50 and
    925 hPa is left out to match the stated channel count.
    """
    chans = [ChannelSchema(n, "single-level") for n in ("LCC", "TCC", "TCW", "TCWV", "FDIR", "SSRD")]
    for var in ("U", "V", "T", "Q", "Z"):
        for lev in PRESSURE_LEVELS:
            if var == "Z" and lev in (50, 925):
                continue
            chans.append(ChannelSchema(var, "pressure-level", lev))
    return tuple(chans)


def stage2_schema():
    """Default stage-2 radiation-relevant channels (11)."""
    chans = [ChannelSchema(n, "single-level") for n in ("TCW", "TCWV", "FDIR", "SSRD")]
    chans += [ChannelSchema("Q", "pressure-level", lev) for lev in PRESSURE_LEVELS]
    return tuple(chans)


@dataclass(frozen=True, eq=False)
class RasterStack:
    """T x C x H x W single-precision fields on a :class:`GeoGrid`.

    Missing values are NaN in memory.
    """

    grid: GeoGrid
    times: list
    channels: list
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "times", [to_datetime(t) if t is not None else None for t in self.times])
        object.__setattr__(self, "channels", list(self.channels))
        if data.ndim != 4:
            raise ShapeError(f"raster data must be 4-D, got {data.shape}")
        t, c, h, w = data.shape
        if len(self.times) != t or len(self.channels) != c:
            raise ShapeError(f"{len(self.times)} times / {len(self.channels)} channels for data {data.shape}")
        if (h, w) != self.grid.shape:
            raise ShapeError(f"data spatial shape {(h, w)} does not match grid {self.grid.shape}")
        if t > 1:
            ep = [to_epoch(x) for x in self.times]
            steps = np.diff(ep)
            if np.any(steps != steps[0]) or steps[0] <= 0:
                raise ShapeError("time axis must be uniformly increasing")
        if np.any(np.isinf(data)):
            raise ShapeError("raster data must be finite or NaN")

    @property
    def shape(self):
        return self.data.shape

    @property
    def step_seconds(self):
        if len(self.times) > 1:
            return to_epoch(self.times[1]) - to_epoch(self.times[0])
        return HOUR

    def select(self, channels):
        idx = [self.channels.index(c) for c in channels]
        return RasterStack(self.grid, self.times, list(channels), self.data[:, idx])

    def slice_time(self, start, stop):
        return RasterStack(self.grid, self.times[start:stop], self.channels, self.data[start:stop])

    def replace(self, data=None, grid=None, channels=None, times=None):
        return RasterStack(
            grid or self.grid,
            self.times if times is None else times,
            self.channels if channels is None else channels,
            self.data if data is None else data,
        )

    def equals(self, other):
        return (
            self.grid == other.grid
            and self.times == other.times
            and self.channels == other.channels
            and self.data.shape == other.data.shape
            and np.array_equal(self.data, other.data, equal_nan=True)
        )


# -- BGSR format -------------------------------------------------------------


def raster_nbytes(t, c, h, w):
    return HEADER.size + NAME_BYTES * c + 4 * t * c * h * w


def _encode_name(name):
    raw = name.encode("ascii")
    if len(raw) > NAME_BYTES:
        raise FormatError(f"channel name {name!r} longer than {NAME_BYTES} bytes")
    return raw.ljust(NAME_BYTES, b" ")


def write_raster(stack: RasterStack, dest) -> int:
    """Serialize ``stack`` to ``dest`` (path or binary file object).

    Paths are written atomically via a temporary file and rename.
    """
    t, c, h, w = stack.shape
    g = stack.grid
    epoch = to_epoch(stack.times[0]) if stack.times and stack.times[0] is not None else 0
    head = HEADER.pack(MAGIC, VERSION, t, c, h, w, g.lat0, g.lon0, g.dlat, g.dlon, epoch, stack.step_seconds)
    names = b"".join(_encode_name(n) for n in stack.channels)
    payload = np.where(np.isnan(stack.data), np.float32(MISSING), stack.data).astype("<f4").tobytes()
    blob = head + names + payload
    if isinstance(dest, (str, os.PathLike)):
        tmp = f"{os.fspath(dest)}.tmp"
        with open(tmp, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, dest)
    else:
        dest.write(blob)
    return len(blob)


def read_raster(source) -> RasterStack:
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            blob = fh.read()
    elif isinstance(source, (bytes, bytearray)):
        blob = bytes(source)
    else:
        blob = source.read()
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise FormatError("bad magic, expected 'BGSR'", 0)
    if len(blob) < HEADER.size:
        raise FormatError(f"truncated header: {len(blob)} bytes", len(blob))
    _, version, t, c, h, w, lat0, lon0, dlat, dlon, epoch, step = HEADER.unpack_from(blob)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    expected = raster_nbytes(t, c, h, w)
    if len(blob) < expected:
        raise FormatError(f"truncated payload: expected {expected} bytes, got {len(blob)}", len(blob))
    names = []
    for k in range(c):
        off = HEADER.size + NAME_BYTES * k
        names.append(blob[off : off + NAME_BYTES].decode("ascii").rstrip(" "))
    off = HEADER.size + NAME_BYTES * c
    data = np.frombuffer(blob, dtype="<f4", count=t * c * h * w, offset=off).reshape(t, c, h, w)
    data = np.where(data == np.float32(MISSING), np.float32(np.nan), data).astype(np.float32)
    try:
        grid = GeoGrid(lat0, lon0, dlat, dlon, h, w)
    except ShapeError as exc:
        raise FormatError(f"invalid grid header: {exc}", 8) from exc
    times = [from_epoch(epoch + step * k) for k in range(t)]
    return RasterStack(grid, times, names, data)


def raster_bytes(stack: RasterStack) -> bytes:
    buf = io.BytesIO()
    write_raster(stack, buf)
    return buf.getvalue()


# -- regridding ----------------------------------------------------------------


def _frac_index(coord, origin, spacing, n):
    pos = (coord - origin) / spacing
    near = np.round(pos)
    pos = np.where(np.abs(pos - near) < 1e-9, near, pos)
    pos = np.clip(pos, 0.0, n - 1)
    i0 = np.floor(pos).astype(np.int64)
    frac = pos - i0
    i1 = np.where(frac > 0, np.minimum(i0 + 1, n - 1), i0)
    return i0, i1, frac


def regrid_array(values, src: GeoGrid, target: GeoGrid):
    """Bilinear interpolation of ``values`` (..., H, W) onto ``target`` centers.

    Target centers outside the source center box but inside the source
    extent take the nearest edge value.
    """
    s, n, w, e = src.extent()
    lats, lons = target.lats(), target.lons()
    tol = 1e-9 * max(1.0, abs(n), abs(e))
    if lats.max() > n + tol or lats.min() < s - tol or lons.min() < w - tol or lons.max() > e + tol:
        raise CoverageError("target grid centers fall outside the source extent")
    r0, r1, fr = _frac_index(-lats, -src.lat0, src.dlat, src.height)
    c0, c1, fc = _frac_index(lons, src.lon0, src.dlon, src.width)
    fr = fr[:, None]
    fc = fc[None, :]
    v = np.asarray(values)
    top = v[..., r0[:, None], c0[None, :]] * (1 - fc) + v[..., r0[:, None], c1[None, :]] * fc
    bot = v[..., r1[:, None], c0[None, :]] * (1 - fc) + v[..., r1[:, None], c1[None, :]] * fc
    out = top * (1 - fr) + bot * fr
    # zero-weight neighbours must not leak NaN into exact hits
    exact = (fr == 0) & (fc == 0)
    if np.any(exact):
        out = np.where(exact, v[..., r0[:, None], c0[None, :]], out)
    return out


def bilinear_regrid(src: RasterStack, target: GeoGrid) -> RasterStack:
    data = regrid_array(src.data.astype(np.float64), src.grid, target).astype(np.float32)
    return RasterStack(target, src.times, src.channels, data)


def crop_to_intersection(stacks):
    """Crop every stack to the largest lat/lon box covered by all of them."""
    if not stacks:
        return []
    exts = [s.grid.extent() for s in stacks]
    south = max(e[0] for e in exts)
    north = min(e[1] for e in exts)
    west = max(e[2] for e in exts)
    east = min(e[3] for e in exts)
    if south >= north or west >= east:
        raise CoverageError("stacks have no common spatial intersection")
    out = []
    for st in stacks:
        g = st.grid
        tol_r, tol_c = 1e-6 * g.dlat, 1e-6 * g.dlon
        lats, lons = g.lats(), g.lons()
        rows = np.nonzero((lats - g.dlat / 2 >= south - tol_r) & (lats + g.dlat / 2 <= north + tol_r))[0]
        cols = np.nonzero((lons - g.dlon / 2 >= west - tol_c) & (lons + g.dlon / 2 <= east + tol_c))[0]
        if rows.size == 0 or cols.size == 0:
            raise CoverageError("intersection is smaller than one cell of a member grid")
        grid = GeoGrid(float(lats[rows[0]]), float(lons[cols[0]]), g.dlat, g.dlon, rows.size, cols.size)
        data = st.data[:, :, rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1]
        out.append(RasterStack(grid, st.times, st.channels, data))
    return out


# -- unit conversion and normalization -----------------------------------------


@dataclass
class ClipCounter:
    clipped: int = 0


SSRD_CLIPS = ClipCounter()


def ssrd_to_ghi(ssrd, counter: ClipCounter | None = None):
    """Hourly accumulated SSRD (J m-2) to mean GHI (W m-2).

    Negative accumulations are clipped to zero and tallied on ``counter``.
    """
    counter = counter or SSRD_CLIPS
    a = np.asarray(ssrd, dtype=np.float64)
    neg = a < 0
    counter.clipped += int(np.count_nonzero(neg))
    out = np.where(neg, 0.0, a) / 3600.0
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class NormStats:
    channels: tuple
    mean: np.ndarray
    std: np.ndarray = field(repr=False)

    def as_dict(self):
        return {c: (float(m), float(s)) for c, m, s in zip(self.channels, self.mean, self.std)}


def fit_norm_stats(stack) -> NormStats:
    """Per-channel mean and std over time and space (NaN ignored).

    Accepts a :class:`RasterStack` or a sequence of them sharing channels.
    """
    stacks = [stack] if isinstance(stack, RasterStack) else list(stack)
    if not stacks:
        raise StatsError("cannot fit statistics on an empty collection")
    chans = tuple(stacks[0].channels)
    parts = [np.moveaxis(s.data, 1, 0).reshape(len(chans), -1).astype(np.float64) for s in stacks]
    flat = np.concatenate(parts, axis=1)
    if flat.shape[1] == 0:
        raise StatsError("stack is empty")
    valid = ~np.isnan(flat)
    if np.any(valid.sum(axis=1) == 0):
        bad = [c for c, v in zip(chans, valid.sum(axis=1)) if v == 0]
        raise StatsError(f"channels with no valid values: {bad}")
    mean = np.nanmean(flat, axis=1)
    std = np.maximum(np.nanstd(flat, axis=1), STD_FLOOR)
    return NormStats(chans, mean, std)


def _stat_arrays(stack, stats):
    idx = [stats.channels.index(c) for c in stack.channels]
    m = stats.mean[idx][None, :, None, None]
    s = stats.std[idx][None, :, None, None]
    return m, s


def apply_norm(stack: RasterStack, stats: NormStats) -> RasterStack:
    m, s = _stat_arrays(stack, stats)
    return stack.replace(data=((stack.data - m) / s).astype(np.float32))


def invert_norm(stack: RasterStack, stats: NormStats) -> RasterStack:
    m, s = _stat_arrays(stack, stats)
    return stack.replace(data=(stack.data.astype(np.float64) * s + m).astype(np.float32))
