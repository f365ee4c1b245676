"""Grid geometry, coordinate projection, and the shared data types.

A rectangular region of interest (default 1 km x 1 km) is discretized into an
M x N pixel grid. Row 0 is the southern edge: y grows northward, x grows
eastward. Sensor coordinates are projected with a local equirectangular
approximation, which is accurate to well under a pixel at kilometre scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from datetime import datetime
from typing import Iterable, Optional

import numpy as np

from .errors import OutOfBounds, ShapeMismatch

# Local equirectangular projection constants (meters per degree).
M_PER_DEG_LAT = 110574.0
M_PER_DEG_LON = 111320.0

UNITS_NORMALIZED = "normalized"
UNITS_VPM = "V/m"


@dataclass(frozen=True)
class GridSpec:
    """Geometry of the reconstruction grid.

    origin is the south-west corner; extent_m is the side length of the
    square region covered by the grid.
    """

    origin_lat: float
    origin_lon: float
    extent_m: float = 1000.0
    rows: int = 128
    cols: int = 128

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid must have at least one row and one column")
        if not (math.isfinite(self.extent_m) and self.extent_m > 0):
            raise ValueError("extent_m must be finite and positive")

    @property
    def pixel_size_x(self) -> float:
        return self.extent_m / self.cols

    @property
    def pixel_size_y(self) -> float:
        return self.extent_m / self.rows

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def n_pixels(self) -> int:
        return self.rows * self.cols


@dataclass(frozen=True)
class SensorReading:
    """One cleaned or raw measurement from a fixed sensor."""

    sensor_id: str
    timestamp: datetime
    lat: float
    lon: float
    e_field: float  # V/m
    humidity: Optional[float] = None  # percent, passthrough only


@dataclass
class ObservationGrid:
    """Sparse snapshot rasterized onto the grid.

    values holds normalized units; mask marks which pixels carry a sensor.
    Unobserved pixels are exactly zero.
    """

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.shape != self.mask.shape:
            raise ShapeMismatch("values and mask shapes differ")
        if np.any(self.values[~self.mask] != 0.0):
            raise ValueError("unobserved pixels must hold zero")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def observed_indices(self) -> np.ndarray:
        """Flat row-major indices of observed pixels, ascending."""
        return np.flatnonzero(self.mask.ravel())

    def observed_values(self) -> np.ndarray:
        """Values at observed pixels, aligned with observed_indices()."""
        return self.values.ravel()[self.observed_indices()]

    @property
    def n_observed(self) -> int:
        return int(self.mask.sum())


@dataclass
class ExposureMap:
    """Dense reconstructed field over the grid.

    excluded flags pixels suppressed from downstream statistics
    (building footprints). Such pixels hold exactly zero.
    """

    values: np.ndarray
    units: str = UNITS_NORMALIZED
    excluded: Optional[np.ndarray] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("exposure map entries must be finite")
        if self.units not in (UNITS_NORMALIZED, UNITS_VPM):
            raise ValueError(f"unknown units tag {self.units!r}")
        if self.excluded is not None:
            self.excluded = np.asarray(self.excluded, dtype=bool)
            if self.excluded.shape != self.values.shape:
                raise ShapeMismatch("excluded mask shape differs from values")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass
class BuildingMask:
    """Binary mask of pixels covered by building footprints."""

    blocked: np.ndarray

    def __post_init__(self):
        blocked = np.asarray(self.blocked)
        if blocked.dtype != bool and not np.all(np.isin(blocked, (0, 1))):
            raise ValueError("building mask must be binary")
        self.blocked = blocked.astype(bool)

    @property
    def shape(self) -> tuple[int, int]:
        return self.blocked.shape


def project_local_xy(spec: GridSpec, lat: float, lon: float) -> tuple[float, float]:
    """Project lat/lon to local (x, y) meters relative to the grid origin."""
    x = (lon - spec.origin_lon) * math.cos(math.radians(spec.origin_lat)) * M_PER_DEG_LON
    y = (lat - spec.origin_lat) * M_PER_DEG_LAT
    return x, y


def latlon_to_pixel(spec: GridSpec, lat: float, lon: float) -> tuple[int, int]:
    """Map a coordinate to its (row, col) pixel.

    Raises OutOfBounds when the projected point falls outside the
    [0, extent_m) x [0, extent_m) region.
    """
    x, y = project_local_xy(spec, lat, lon)
    if not (0.0 <= x < spec.extent_m and 0.0 <= y < spec.extent_m):
        raise OutOfBounds(
            f"point ({lat:.6f}, {lon:.6f}) projects to ({x:.1f} m, {y:.1f} m), "
            f"outside [0, {spec.extent_m:g}) squared"
        )
    col = int(x // spec.pixel_size_x)
    row = int(y // spec.pixel_size_y)
    # Guard the half-open upper edge against float division rounding up.
    return min(row, spec.rows - 1), min(col, spec.cols - 1)


def pixel_to_latlon(spec: GridSpec, row: int, col: int) -> tuple[float, float]:
    """Lat/lon of a pixel center. Inverse of latlon_to_pixel at centers."""
    x = (col + 0.5) * spec.pixel_size_x
    y = (row + 0.5) * spec.pixel_size_y
    lat = spec.origin_lat + y / M_PER_DEG_LAT
    lon = spec.origin_lon + x / (math.cos(math.radians(spec.origin_lat)) * M_PER_DEG_LON)
    return lat, lon


def pixel_index(spec_or_shape, row: int, col: int) -> int:
    """Flat row-major index of a pixel."""
    shape = spec_or_shape.shape if hasattr(spec_or_shape, "shape") else spec_or_shape
    return row * shape[1] + col


def rasterize_readings(
    readings: Iterable[SensorReading],
    spec: GridSpec,
    norm,
) -> tuple[ObservationGrid, int]:
    """Rasterize one snapshot of cleaned readings onto the grid.

    Each reading is normalized with ``norm`` and written to its pixel;
    several sensors landing in the same pixel are averaged. Readings that
    project outside the grid are dropped. Returns the observation grid and
    the count of dropped out-of-bounds readings.
    """
    sums = np.zeros(spec.shape, dtype=np.float64)
    counts = np.zeros(spec.shape, dtype=np.int64)
    dropped = 0
    for r in readings:
        try:
            row, col = latlon_to_pixel(spec, r.lat, r.lon)
        except OutOfBounds:
            dropped += 1
            continue
        sums[row, col] += norm.normalize(r.e_field)
        counts[row, col] += 1
    mask = counts > 0
    values = np.zeros(spec.shape, dtype=np.float64)
    values[mask] = sums[mask] / counts[mask]
    return ObservationGrid(values=values, mask=mask), dropped


def apply_building_mask(emap: ExposureMap, buildings: BuildingMask) -> ExposureMap:
    """Zero out building pixels and flag them excluded.

    Idempotent; all other pixels are untouched.
    """
    if emap.shape != buildings.shape:
        raise ShapeMismatch(
            f"map shape {emap.shape} != building mask shape {buildings.shape}"
        )
    values = emap.values.copy()
    values[buildings.blocked] = 0.0
    excluded = buildings.blocked.copy()
    if emap.excluded is not None:
        excluded |= emap.excluded
    return ExposureMap(values=values, units=emap.units, excluded=excluded)
