import sys
from datetime import datetime
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from expomap.grid import GridSpec, ObservationGrid, SensorReading
from expomap.ingest import NormParams


@pytest.fixture
def unit_norm():
    """Identity normalization on [0, 1]."""
    return NormParams(0.0, 1.0)


@pytest.fixture
def small_spec():
    """8 x 8 grid, 1 km, origin at the equator for simple projection math."""
    return GridSpec(origin_lat=0.0, origin_lon=0.0, extent_m=1000.0, rows=8, cols=8)


def make_reading(sensor_id="s0", value=0.5, lat=0.0, lon=0.0, ts="2024-01-01T00:00:00+00:00"):
    return SensorReading(
        sensor_id=sensor_id,
        timestamp=datetime.fromisoformat(ts),
        lat=lat,
        lon=lon,
        e_field=value,
    )


def obs_from_pixels(shape, pixels, values):
    """Build an ObservationGrid directly from flat pixel indices."""
    grid = np.zeros(shape)
    mask = np.zeros(shape, dtype=bool)
    for pix, val in zip(pixels, values):
        r, c = divmod(int(pix), shape[1])
        grid[r, c] = val
        mask[r, c] = True
    return ObservationGrid(values=grid, mask=mask)
