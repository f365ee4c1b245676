import io
import json
from datetime import datetime, timedelta, timezone

import numpy as np
import pytest

from expomap.errors import DegenerateRange, MissingColumn
from expomap.ingest import (
    NormParams,
    bin_snapshots,
    clean_readings,
    fit_norm,
    load_building_polygons,
    parse_sensor_csv,
    rasterize_buildings,
    write_sensor_csv,
)

from conftest import make_reading

HEADER = "sensor_id,timestamp,lat,lon,e_field_vpm,humidity\n"


def csv_stream(*rows):
    return io.BytesIO((HEADER + "".join(r + "\n" for r in rows)).encode())


class TestParseSensorCsv:
    def test_header_only(self):
        readings, malformed = parse_sensor_csv(csv_stream())
        assert readings == [] and malformed == []

    def test_single_row(self):
        readings, malformed = parse_sensor_csv(
            csv_stream("s1,2023-11-23T10:00:00Z,50.62,3.02,0.45,55")
        )
        assert not malformed
        (r,) = readings
        assert r.sensor_id == "s1"
        assert r.timestamp == datetime(2023, 11, 23, 10, tzinfo=timezone.utc)
        assert r.lat == 50.62 and r.lon == 3.02
        assert r.e_field == 0.45
        assert r.humidity == 55.0

    def test_humidity_optional(self):
        readings, malformed = parse_sensor_csv(
            csv_stream("s1,2023-11-23T10:00:00Z,50.62,3.02,0.45,")
        )
        assert not malformed
        assert readings[0].humidity is None

    def test_malformed_row_collected(self):
        readings, malformed = parse_sensor_csv(
            csv_stream(
                "s1,2023-11-23T10:00:00Z,50.0,3.0,0.5,",
                "s2,2023-11-23T10:00:00Z,50.0,3.0,not-a-number,",
                "s3,2023-11-23T10:00:00Z,50.0,3.0,0.7,",
            )
        )
        assert [r.sensor_id for r in readings] == ["s1", "s3"]
        assert len(malformed) == 1
        assert malformed[0].row_index == 2

    def test_missing_column_fatal(self):
        stream = io.BytesIO(b"sensor_id,timestamp,lat,lon\ns1,2023-11-23T10:00:00Z,1,2\n")
        with pytest.raises(MissingColumn):
            parse_sensor_csv(stream)

    def test_row_order_preserved(self):
        rows = [f"s{i},2023-11-23T0{i}:00:00Z,50.0,3.0,0.{i}," for i in range(1, 6)]
        readings, _ = parse_sensor_csv(csv_stream(*rows))
        assert [r.sensor_id for r in readings] == [f"s{i}" for i in range(1, 6)]

    def test_round_trip_through_writer(self, tmp_path):
        readings = [
            make_reading("a", 0.31, lat=50.1, lon=3.2),
            make_reading("b", 0.72, lat=50.2, lon=3.3),
        ]
        path = tmp_path / "sensors.csv"
        write_sensor_csv(readings, path)
        with open(path, "rb") as fh:
            parsed, malformed = parse_sensor_csv(fh)
        assert not malformed
        assert [r.sensor_id for r in parsed] == ["a", "b"]
        assert parsed[0].e_field == 0.31
        assert parsed[0].timestamp == readings[0].timestamp


class TestCleanReadings:
    def test_exact_duplicate_dropped(self):
        r = make_reading("a", 0.5)
        out, report = clean_readings([r, r])
        assert len(out) == 1
        assert report.duplicates_dropped == 1

    def test_nan_dropped(self):
        out, report = clean_readings([make_reading("a", float("nan")), make_reading("b", 0.5)])
        assert len(out) == 1
        assert report.nan_dropped == 1

    def test_physical_bounds(self):
        readings = [
            make_reading("a", -0.1),
            make_reading("b", 12.0),
            make_reading("c", 0.5),
        ]
        out, report = clean_readings(readings)
        assert [r.sensor_id for r in out] == ["c"]
        assert report.out_of_bounds_dropped == 2

    def test_mad_spike_dropped(self):
        # 100 readings near 0.5 V/m with a hand-checkable MAD bound:
        # values 0.5 +/- 0.01 alternating, so median = 0.5 and MAD = 0.01;
        # the 9.9 spike deviates 9.4 >> 6 * 0.01.
        base = datetime(2024, 1, 1, tzinfo=timezone.utc)
        readings = [
            make_reading(
                "a",
                0.5 + (0.01 if i % 2 else -0.01),
                ts=(base + timedelta(minutes=i)).isoformat(),
            )
            for i in range(100)
        ]
        spike = make_reading("a", 9.9, ts="2024-01-02T05:00:00+00:00")
        out, report = clean_readings(readings + [spike])
        assert report.outliers_dropped == 1
        assert all(r.e_field != 9.9 for r in out)
        assert len(out) == 100

    def test_mad_zero_sensor_left_alone(self):
        readings = [make_reading("a", 0.5, ts=f"2024-01-01T{i:02d}:00:00+00:00") for i in range(10)]
        readings.append(make_reading("a", 0.9, ts="2024-01-01T12:00:00+00:00"))
        out, report = clean_readings(readings)
        # median 0.5, MAD 0 -> robust filter skipped entirely
        assert report.outliers_dropped == 0
        assert len(out) == 11

    def test_count_invariant(self):
        rng = np.random.default_rng(5)
        readings = []
        for i in range(200):
            val = float(rng.choice([rng.uniform(0, 1), 11.0, float("nan"), 9.5]))
            readings.append(
                make_reading(f"s{i % 7}", val, ts=f"2024-01-0{1 + i % 5}T{i % 24:02d}:00:00+00:00")
            )
        readings += readings[:13]  # guaranteed duplicates
        out, report = clean_readings(readings)
        assert len(out) + report.total_dropped() == len(readings)

    def test_idempotent_on_own_output(self):
        rng = np.random.default_rng(17)
        readings = []
        for i in range(300):
            base = 0.4 if i % 3 else 2.0
            readings.append(
                make_reading(
                    f"s{i % 5}",
                    float(base + rng.normal(0, 0.05) + (8.0 if i % 97 == 0 else 0.0)),
                    ts=f"2024-01-01T{i % 24:02d}:{i % 60:02d}:00+00:00",
                )
            )
        once, _ = clean_readings(readings)
        twice, report2 = clean_readings(once)
        assert twice == once
        assert report2.total_dropped() == 0


class TestNormalization:
    def test_fit_norm_and_midpoint(self):
        readings = [make_reading("a", 0.2), make_reading("b", 1.2)]
        params = fit_norm(readings)
        assert params == NormParams(0.2, 1.2)
        assert params.normalize(0.7) == pytest.approx(0.5)

    def test_normalize_endpoints(self):
        p = NormParams(0.2, 1.2)
        assert p.normalize(0.2) == 0.0
        assert p.normalize(1.2) == 1.0

    def test_round_trip(self):
        p = NormParams(0.13, 4.6)
        rng = np.random.default_rng(2)
        x = rng.uniform(0, 5, size=50)
        assert np.allclose(p.denormalize(p.normalize(x)), x, rtol=0, atol=1e-12)

    def test_degenerate_range(self):
        with pytest.raises(DegenerateRange):
            fit_norm([make_reading("a", 0.5), make_reading("b", 0.5)])
        with pytest.raises(DegenerateRange):
            NormParams(1.0, 1.0)


class TestBinSnapshots:
    def test_hundred_hours_two_hour_bins(self):
        readings = [
            make_reading("a", 0.5, ts="2023-11-23T00:00:00+00:00")
        ]
        base = datetime(2023, 11, 23, tzinfo=timezone.utc)
        readings = [
            make_reading("a", 0.5, ts=(base + timedelta(hours=h)).isoformat())
            for h in range(100)
        ]
        bins = bin_snapshots(readings, period=timedelta(hours=2))
        assert len(bins) == 50

    def test_latest_per_sensor_wins(self):
        early = make_reading("a", 0.1, ts="2024-01-01T00:10:00+00:00")
        late = make_reading("a", 0.9, ts="2024-01-01T01:50:00+00:00")
        bins = bin_snapshots([late, early], period=timedelta(hours=2))
        assert len(bins) == 1
        assert bins[0][0].e_field == 0.9

    def test_empty_input(self):
        assert bin_snapshots([]) == []

    def test_partition_property(self):
        rng = np.random.default_rng(9)
        base = datetime(2024, 1, 1, tzinfo=timezone.utc)
        readings = [
            make_reading(
                f"s{i}",  # distinct sensors so none collapse within a bin
                0.5,
                ts=(base + timedelta(minutes=float(rng.uniform(0, 5000)))).isoformat(),
            )
            for i in range(100)
        ]
        bins = bin_snapshots(readings, period=timedelta(hours=2))
        total = sum(len(b) for b in bins)
        assert total == len(readings)
        period = timedelta(hours=2)
        t0 = min(r.timestamp for r in readings)
        for k, b in enumerate(bins):
            for r in b:
                assert t0 + k * period <= r.timestamp < t0 + (k + 1) * period


class TestRasterizeBuildings:
    def test_no_polygons_all_clear(self, small_spec):
        mask = rasterize_buildings([], small_spec)
        assert not mask.blocked.any()

    def test_left_half_rectangle(self, small_spec):
        # Covers x in [-1, 500) m; pixel centers at 62.5 + 125k, so exactly
        # columns 0..3 are inside.
        m_lon = 1.0 / 111320.0
        m_lat = 1.0 / 110574.0
        ring = [
            (-1 * m_lon, -1 * m_lat),
            (500 * m_lon, -1 * m_lat),
            (500 * m_lon, 1001 * m_lat),
            (-1 * m_lon, 1001 * m_lat),
            (-1 * m_lon, -1 * m_lat),
        ]
        mask = rasterize_buildings([[ring]], small_spec)
        expected = np.zeros((8, 8), dtype=bool)
        expected[:, :4] = True
        assert np.array_equal(mask.blocked, expected)

    def test_matches_independent_point_in_polygon(self, small_spec):
        from matplotlib.path import Path

        rng = np.random.default_rng(4)
        m_lon = 1.0 / 111320.0
        m_lat = 1.0 / 110574.0
        pts = rng.uniform(100, 900, size=(6, 2))
        ring = [(x * m_lon, y * m_lat) for x, y in pts] + [(pts[0, 0] * m_lon, pts[0, 1] * m_lat)]
        mask = rasterize_buildings([[ring]], small_spec)

        centers_x = (np.arange(8) + 0.5) * 125.0
        centers_y = (np.arange(8) + 0.5) * 125.0
        xx, yy = np.meshgrid(centers_x, centers_y)
        path = Path(pts)
        oracle = path.contains_points(np.column_stack([xx.ravel(), yy.ravel()])).reshape(8, 8)
        assert np.array_equal(mask.blocked, oracle)

    def test_polygon_outside_roi(self, small_spec):
        m = 1.0 / 111320.0
        ring = [(2000 * m, 2000 * m), (3000 * m, 2000 * m), (3000 * m, 3000 * m), (2000 * m, 2000 * m)]
        mask = rasterize_buildings([[ring]], small_spec)
        assert not mask.blocked.any()

    def test_degenerate_ring_skipped(self, small_spec):
        ring = [(0.0, 0.0), (0.001, 0.001), (0.0, 0.0)]
        mask = rasterize_buildings([[ring]], small_spec)
        assert not mask.blocked.any()

    def test_hole_via_even_odd(self, small_spec):
        m_lon = 1.0 / 111320.0
        m_lat = 1.0 / 110574.0

        def rect(x0, y0, x1, y1):
            return [
                (x0 * m_lon, y0 * m_lat),
                (x1 * m_lon, y0 * m_lat),
                (x1 * m_lon, y1 * m_lat),
                (x0 * m_lon, y1 * m_lat),
                (x0 * m_lon, y0 * m_lat),
            ]

        outer = rect(-1, -1, 1001, 1001)
        hole = rect(240, 240, 760, 760)
        mask = rasterize_buildings([[outer, hole]], small_spec)
        # center pixels sit inside the hole -> not blocked
        assert not mask.blocked[4, 4]
        assert mask.blocked[0, 0]

    def test_geojson_loader(self, tmp_path):
        doc = {
            "type": "FeatureCollection",
            "features": [
                {
                    "type": "Feature",
                    "geometry": {
                        "type": "Polygon",
                        "coordinates": [[[0, 0], [1, 0], [1, 1], [0, 0]]],
                    },
                },
                {
                    "type": "Feature",
                    "geometry": {
                        "type": "MultiPolygon",
                        "coordinates": [
                            [[[2, 2], [3, 2], [3, 3], [2, 2]]],
                            [[[4, 4], [5, 4], [5, 5], [4, 4]]],
                        ],
                    },
                },
            ],
        }
        path = tmp_path / "buildings.json"
        path.write_text(json.dumps(doc))
        polygons = load_building_polygons(path)
        assert len(polygons) == 3
        assert polygons[0][0][0] == [0, 0]
