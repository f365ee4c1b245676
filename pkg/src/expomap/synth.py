"""Synthetic ground-truth fields and simulated sensor readings.

Keeps the full pipeline testable without the real sensor network: a few
point sources with power-law decay, combined in the power domain, plus
smoothed log-normal shadowing for spatial roughness.
"""

from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime, timezone

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import TooManySensors
from .grid import (
    BuildingMask,
    ExposureMap,
    GridSpec,
    SensorReading,
    UNITS_VPM,
    pixel_to_latlon,
)

DEFAULT_TIMESTAMP = datetime(2024, 1, 1, 0, 0, 0, tzinfo=timezone.utc)


@dataclass(frozen=True)
class SourceSpec:
    """A point emitter: pixel position, amplitude at 1 m, decay, shadowing."""

    row: int
    col: int
    amplitude: float  # V/m at 1 m
    exponent: float = 1.0  # amplitude decay exponent
    shadow_sigma_db: float = 4.0

    def __post_init__(self):
        if self.amplitude <= 0:
            raise ValueError("source amplitude must be positive")
        if self.exponent <= 0:
            raise ValueError("decay exponent must be positive")


def generate_field(spec: GridSpec, sources, seed: int) -> ExposureMap:
    """Ground-truth V/m field over the grid, deterministic per seed.

    Per pixel the sources combine as a power sum of (amp / max(d, 1m))
    contributions; the result is multiplied by log-normal shadowing
    (smoothed with a 5-pixel box filter) whose dB sigma is the largest
    declared by any source.
    """
    sources = list(sources)
    if not sources:
        raise ValueError("need at least one source")
    rows, cols = spec.shape
    px = (np.arange(cols) + 0.5) * spec.pixel_size_x
    py = (np.arange(rows) + 0.5) * spec.pixel_size_y
    xx, yy = np.meshgrid(px, py)

    power = np.zeros(spec.shape)
    for src in sources:
        sx = (src.col + 0.5) * spec.pixel_size_x
        sy = (src.row + 0.5) * spec.pixel_size_y
        d = np.hypot(xx - sx, yy - sy)
        power += (src.amplitude / np.maximum(d, 1.0)) ** (2.0 * src.exponent)
    field = np.sqrt(power)

    sigma_db = max(src.shadow_sigma_db for src in sources)
    if sigma_db > 0:
        rng = np.random.default_rng(seed)
        shade_db = uniform_filter(rng.normal(0.0, sigma_db, size=spec.shape), size=5)
        field = field * 10.0 ** (shade_db / 20.0)
    return ExposureMap(values=field, units=UNITS_VPM)


def sample_sensors(
    field: ExposureMap,
    spec: GridSpec,
    count: int,
    seed: int,
    noise_std: float = 0.01,
    buildings: BuildingMask | None = None,
    timestamp: datetime = DEFAULT_TIMESTAMP,
    noise_seed: int | None = None,
) -> list[SensorReading]:
    """Simulate ``count`` sensors at distinct non-building pixels.

    Readings are the field value plus Gaussian noise, clamped at zero, and
    positioned at pixel centers so that rasterization puts them back on the
    pixel they came from. Positions depend on ``seed`` only; passing a
    separate ``noise_seed`` redraws the noise while keeping the stations
    fixed (one series, many snapshots).
    """
    rows, cols = field.shape
    available = np.arange(rows * cols)
    if buildings is not None:
        available = available[~buildings.blocked.ravel()]
    if count > len(available):
        raise TooManySensors(
            f"requested {count} sensors but only {len(available)} free pixels"
        )
    rng = np.random.default_rng(seed)
    chosen = rng.choice(available, size=count, replace=False)
    noise_rng = rng if noise_seed is None else np.random.default_rng(noise_seed)
    noise = noise_rng.normal(0.0, noise_std, size=count) if noise_std > 0 else np.zeros(count)

    readings = []
    for i, (pix, eps) in enumerate(zip(chosen, noise)):
        r, c = divmod(int(pix), cols)
        lat, lon = pixel_to_latlon(spec, r, c)
        value = max(field.values[r, c] + eps, 0.0)
        readings.append(
            SensorReading(
                sensor_id=f"s{i:03d}",
                timestamp=timestamp,
                lat=lat,
                lon=lon,
                e_field=float(value),
            )
        )
    return readings
