"""Sensor CSV parsing, cleaning, normalization, snapshot binning, buildings.

The sensor CSV schema (UTF-8, comma-separated, header required):

    sensor_id,timestamp,lat,lon,e_field_vpm[,humidity]

with ISO-8601 timestamps. Building footprints come from a GeoJSON-compatible
JSON file (Polygon / MultiPolygon, coordinates in lon/lat order).
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass
from datetime import datetime, timedelta
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateRange, MissingColumn
from .grid import BuildingMask, GridSpec, SensorReading, project_local_xy

log = logging.getLogger(__name__)

REQUIRED_COLUMNS = ("sensor_id", "timestamp", "lat", "lon", "e_field_vpm")

# Physical plausibility window for ambient E-field readings, V/m.
DEFAULT_MIN_VPM = 0.0
DEFAULT_MAX_VPM = 10.0
DEFAULT_MAD_MULTIPLIER = 6.0


@dataclass(frozen=True)
class NormParams:
    """Affine min-max normalization fitted on a cleaning window."""

    min_vpm: float
    max_vpm: float

    def __post_init__(self):
        if not (math.isfinite(self.min_vpm) and math.isfinite(self.max_vpm)):
            raise ValueError("normalization bounds must be finite")
        if self.max_vpm <= self.min_vpm:
            raise DegenerateRange(
                f"max_vpm ({self.max_vpm}) must exceed min_vpm ({self.min_vpm})"
            )

    def normalize(self, x):
        return (x - self.min_vpm) / (self.max_vpm - self.min_vpm)

    def denormalize(self, x):
        return x * (self.max_vpm - self.min_vpm) + self.min_vpm


@dataclass
class CleaningReport:
    """Per-category drop tallies from clean_readings."""

    duplicates_dropped: int = 0
    nan_dropped: int = 0
    outliers_dropped: int = 0
    out_of_bounds_dropped: int = 0

    def total_dropped(self) -> int:
        return (
            self.duplicates_dropped
            + self.nan_dropped
            + self.outliers_dropped
            + self.out_of_bounds_dropped
        )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class MalformedRow:
    """A CSV row that could not be parsed: 1-based data row index + reason."""

    row_index: int
    reason: str


def _parse_timestamp(text: str) -> datetime:
    # datetime.fromisoformat on 3.10 does not accept a trailing Z.
    text = text.strip()
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    return datetime.fromisoformat(text)


def parse_sensor_csv(stream) -> tuple[list[SensorReading], list[MalformedRow]]:
    """Parse sensor readings from a CSV stream (bytes or text).

    Rows that fail to parse are collected as MalformedRow records rather
    than aborting; a missing required column is fatal. Row order is
    preserved in the output.
    """
    if isinstance(stream, (bytes, bytearray)):
        stream = io.BytesIO(stream)
    if hasattr(stream, "read") and isinstance(stream.read(0), bytes):
        stream = io.TextIOWrapper(stream, encoding="utf-8", newline="")
    reader = csv.DictReader(stream)
    if reader.fieldnames is None:
        raise MissingColumn("sensor CSV is empty (no header row)")
    fields = [f.strip() for f in reader.fieldnames]
    missing = [c for c in REQUIRED_COLUMNS if c not in fields]
    if missing:
        raise MissingColumn(f"sensor CSV lacks required column(s): {', '.join(missing)}")

    readings: list[SensorReading] = []
    malformed: list[MalformedRow] = []
    for i, row in enumerate(reader, start=1):
        try:
            humidity_text = (row.get("humidity") or "").strip()
            readings.append(
                SensorReading(
                    sensor_id=row["sensor_id"].strip(),
                    timestamp=_parse_timestamp(row["timestamp"]),
                    lat=float(row["lat"]),
                    lon=float(row["lon"]),
                    e_field=float(row["e_field_vpm"]),
                    humidity=float(humidity_text) if humidity_text else None,
                )
            )
        except (ValueError, TypeError, KeyError) as exc:
            malformed.append(MalformedRow(row_index=i, reason=str(exc)))
    return readings, malformed


def write_sensor_csv(readings: Iterable[SensorReading], path) -> None:
    """Write readings in the same CSV schema parse_sensor_csv consumes."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sensor_id", "timestamp", "lat", "lon", "e_field_vpm", "humidity"])
        for r in readings:
            writer.writerow(
                [
                    r.sensor_id,
                    r.timestamp.isoformat(),
                    f"{r.lat:.10f}",
                    f"{r.lon:.10f}",
                    f"{r.e_field:.12g}",
                    "" if r.humidity is None else f"{r.humidity:g}",
                ]
            )


def _reading_key(r: SensorReading):
    return (r.sensor_id, r.timestamp, r.lat, r.lon, r.e_field, r.humidity)


def clean_readings(
    readings: Sequence[SensorReading],
    *,
    min_vpm: float = DEFAULT_MIN_VPM,
    max_vpm: float = DEFAULT_MAX_VPM,
    mad_multiplier: float = DEFAULT_MAD_MULTIPLIER,
) -> tuple[list[SensorReading], CleaningReport]:
    """Drop duplicates, non-finite values, out-of-range values, and outliers.

    The robust filter drops a reading when |x - median| > mad_multiplier * MAD
    of its sensor's values (sensors with MAD = 0 are left alone), and repeats
    until stable so that cleaning its own output drops nothing.
    """
    report = CleaningReport()

    seen = set()
    deduped = []
    for r in readings:
        key = _reading_key(r)
        if key in seen:
            report.duplicates_dropped += 1
            continue
        seen.add(key)
        deduped.append(r)

    finite = []
    for r in deduped:
        if math.isfinite(r.e_field):
            finite.append(r)
        else:
            report.nan_dropped += 1

    bounded = []
    for r in finite:
        if min_vpm <= r.e_field <= max_vpm:
            bounded.append(r)
        else:
            report.out_of_bounds_dropped += 1

    by_sensor: dict[str, list[SensorReading]] = {}
    for r in bounded:
        by_sensor.setdefault(r.sensor_id, []).append(r)

    kept_ids = set()
    for sensor_id, group in by_sensor.items():
        keep = list(range(len(group)))
        while True:
            values = np.array([group[i].e_field for i in keep])
            med = np.median(values)
            mad = np.median(np.abs(values - med))
            if mad <= 0:
                break
            survivors = [i for i in keep if abs(group[i].e_field - med) <= mad_multiplier * mad]
            if len(survivors) == len(keep):
                break
            report.outliers_dropped += len(keep) - len(survivors)
            keep = survivors
        kept_ids.update((sensor_id, i) for i in keep)

    out = []
    sensor_counter: dict[str, int] = {}
    for r in bounded:
        i = sensor_counter.get(r.sensor_id, 0)
        sensor_counter[r.sensor_id] = i + 1
        if (r.sensor_id, i) in kept_ids:
            out.append(r)
    return out, report


def fit_norm(readings: Sequence[SensorReading]) -> NormParams:
    """Min-max normalization over all cleaned readings in the window."""
    if len(readings) < 2:
        raise DegenerateRange("need at least two readings to fit normalization")
    values = [r.e_field for r in readings]
    lo, hi = min(values), max(values)
    if hi == lo:
        raise DegenerateRange(f"all readings equal ({lo} V/m); range is degenerate")
    return NormParams(min_vpm=lo, max_vpm=hi)


def normalize(x, params: NormParams):
    return params.normalize(x)


def denormalize(x, params: NormParams):
    return params.denormalize(x)


def bin_snapshots(
    readings: Sequence[SensorReading],
    period: timedelta = timedelta(hours=2),
) -> list[list[SensorReading]]:
    """Group readings into consecutive period-aligned bins.

    Bin k covers [t0 + k*period, t0 + (k+1)*period) where t0 is the earliest
    timestamp. Within a bin only the latest reading per sensor survives.
    Empty bins inside the span are kept so snapshot indices map to wall time.
    """
    if not readings:
        return []
    if period <= timedelta(0):
        raise ValueError("bin period must be positive")
    t0 = min(r.timestamp for r in readings)
    t_max = max(r.timestamp for r in readings)
    n_bins = int((t_max - t0) / period) + 1

    latest: list[dict[str, SensorReading]] = [dict() for _ in range(n_bins)]
    for r in readings:
        k = int((r.timestamp - t0) / period)
        prev = latest[k].get(r.sensor_id)
        if prev is None or r.timestamp >= prev.timestamp:
            latest[k][r.sensor_id] = r
    return [sorted(b.values(), key=lambda r: (r.sensor_id, r.timestamp)) for b in latest]


def _ring_xy(ring, spec: GridSpec) -> np.ndarray:
    """Project a lon/lat ring to local meters; drops the closing vertex."""
    pts = [project_local_xy(spec, lat, lon) for lon, lat in ring]
    if len(pts) > 1 and pts[0] == pts[-1]:
        pts = pts[:-1]
    return np.asarray(pts, dtype=np.float64)


def _crossings(px: np.ndarray, py: np.ndarray, verts: np.ndarray) -> np.ndarray:
    """Count of ray crossings (rightward ray) per point, for one ring."""
    x1, y1 = verts[:, 0], verts[:, 1]
    x2, y2 = np.roll(x1, -1), np.roll(y1, -1)
    count = np.zeros(px.shape, dtype=np.int64)
    for ax, ay, bx, by in zip(x1, y1, x2, y2):
        if ay == by:
            continue
        straddles = (ay > py) != (by > py)
        with np.errstate(invalid="ignore"):
            x_at = ax + (py - ay) * (bx - ax) / (by - ay)
        count += straddles & (px < x_at)
    return count


def rasterize_buildings(polygons, spec: GridSpec) -> BuildingMask:
    """Mark pixels whose centers fall inside any footprint polygon.

    ``polygons`` is a list of polygons, each a list of closed lon/lat rings
    (exterior first, holes after, combined by the even-odd rule). A bare
    ring is accepted as a single-ring polygon. Rings with fewer than three
    distinct vertices are skipped with a warning.
    """
    rows, cols = spec.shape
    cx = (np.arange(cols) + 0.5) * spec.pixel_size_x
    cy = (np.arange(rows) + 0.5) * spec.pixel_size_y
    px, py = np.meshgrid(cx, cy)

    blocked = np.zeros(spec.shape, dtype=bool)
    for poly in polygons:
        if poly and isinstance(poly[0], (tuple, list)) and np.isscalar(poly[0][0]):
            poly = [poly]  # bare ring
        crossings = np.zeros(spec.shape, dtype=np.int64)
        for ring in poly:
            verts = _ring_xy(ring, spec)
            if len(np.unique(verts, axis=0)) < 3:
                log.warning("skipping degenerate footprint ring (%d distinct vertices)", len(np.unique(verts, axis=0)) if len(verts) else 0)
                continue
            crossings += _crossings(px, py, verts)
        blocked |= (crossings % 2) == 1
    return BuildingMask(blocked=blocked)


def load_building_polygons(path) -> list:
    """Read Polygon/MultiPolygon geometries from a GeoJSON-compatible file.

    Returns a list of polygons in the shape rasterize_buildings expects.
    Accepts a FeatureCollection, a single Feature, a bare geometry, or a
    plain list of rings.
    """
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)

    polygons = []

    def add_geometry(geom):
        gtype = geom.get("type")
        if gtype == "Polygon":
            polygons.append(geom["coordinates"])
        elif gtype == "MultiPolygon":
            polygons.extend(geom["coordinates"])
        elif gtype == "GeometryCollection":
            for g in geom.get("geometries", []):
                add_geometry(g)

    if isinstance(doc, dict):
        dtype = doc.get("type")
        if dtype == "FeatureCollection":
            for feature in doc.get("features", []):
                geom = feature.get("geometry")
                if geom:
                    add_geometry(geom)
        elif dtype == "Feature":
            if doc.get("geometry"):
                add_geometry(doc["geometry"])
        else:
            add_geometry(doc)
    elif isinstance(doc, list):
        polygons = doc
    return polygons
