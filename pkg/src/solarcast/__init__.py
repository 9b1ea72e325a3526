"""Gridded solar irradiance nowcasting: clear-sky engine, raster I/O,
synthetic cloud world, two-stage attention forecaster and evaluation."""

from .errors import SolarcastError
from .grid import GeoGrid, RasterStack, read_raster, write_raster
from .solar import ClearSkyParams, clear_sky_grid, solar_zenith

__version__ = "0.1.0"

__all__ = [
    "ClearSkyParams",
    "GeoGrid",
    "RasterStack",
    "SolarcastError",
    "clear_sky_grid",
    "read_raster",
    "solar_zenith",
    "write_raster",
]
