import math

import pytest
from hypothesis import given, settings, strategies as st

from otdkit import model
from otdkit.model import (
    Route, Stop, StopEvent, SwipeRecord, TripRun,
    bearing_angle, distance,
)


def haversine_oracle(a, b, radius_m=6371008.8):
    la1, lo1, la2, lo2 = map(math.radians, (*a, *b))
    h = math.sin((la2 - la1) / 2) ** 2 + math.cos(la1) * math.cos(la2) * math.sin((lo2 - lo1) / 2) ** 2
    return 2 * radius_m * math.asin(math.sqrt(h))


coords = st.tuples(
    st.floats(min_value=-89.0, max_value=89.0),
    st.floats(min_value=-179.0, max_value=179.0),
)


class TestDistance:
    def test_identity(self):
        assert distance((22.2, 113.5), (22.2, 113.5)) == 0.0

    def test_equator_hundredth_degree(self):
        # frozen from the haversine closed form at R = 6371.0088 km
        assert distance((0.0, 0.0), (0.0, 0.01)) == pytest.approx(1111.95, abs=0.5)

    def test_city_latitude_hundredth_degree(self):
        assert distance((22.2, 113.5), (22.2, 113.51)) == pytest.approx(1029.52, abs=1.0)

    @given(coords, coords)
    def test_symmetry(self, a, b):
        assert distance(a, b) == pytest.approx(distance(b, a), rel=1e-12)

    @given(coords, coords, coords)
    @settings(max_examples=200)
    def test_triangle_inequality(self, a, b, c):
        assert distance(a, c) <= distance(a, b) + distance(b, c) + 1e-6

    @given(coords, coords)
    def test_matches_oracle(self, a, b):
        assert distance(a, b) == pytest.approx(haversine_oracle(a, b), abs=1e-6)


class TestBearingAngle:
    def test_identical_vectors(self):
        v = ((22.2, 113.5), (22.25, 113.52))
        assert bearing_angle(v, v) == pytest.approx(0.0, abs=1e-9)

    def test_reversed_vectors(self):
        v = ((22.2, 113.5), (22.25, 113.52))
        w = ((22.25, 113.52), (22.2, 113.5))
        assert bearing_angle(v, w) == pytest.approx(180.0, abs=1e-6)

    def test_orthogonal(self):
        east = ((0.0, 0.0), (0.0, 0.001))
        north = ((0.0, 0.0), (0.001, 0.0))
        assert bearing_angle(east, north) == pytest.approx(90.0, abs=0.1)

    def test_degenerate_raises(self):
        with pytest.raises(ValueError, match="zero-length"):
            bearing_angle(((1.0, 1.0), (1.0, 1.0)), ((0.0, 0.0), (1.0, 1.0)))


class TestInvariants:
    def test_stop_coordinate_bounds(self):
        with pytest.raises(ValueError):
            Stop("s1", "x", 91.0, 0.0)

    def test_route_needs_two_stops(self):
        with pytest.raises(ValueError):
            Route("r1", "up", ("a",), 10.0)

    def test_route_rejects_consecutive_duplicates(self):
        with pytest.raises(ValueError):
            Route("r1", "up", ("a", "a", "b"), 10.0)

    def test_swipe_positive_ts(self):
        with pytest.raises(ValueError):
            SwipeRecord("c", 0, "v", "r")

    def test_stop_event_ordering(self):
        with pytest.raises(ValueError):
            StopEvent("v", "r", "s", 100, 50)

    def test_trip_run_monotone(self):
        ev = [StopEvent("v", "r", "a", 100, 110), StopEvent("v", "r", "b", 90, 95)]
        with pytest.raises(ValueError):
            TripRun("v", "r", 0, tuple(ev))

    def test_route_line_strips_direction(self):
        assert Route("L3-up", "up", ("a", "b"), 10.0).line == "L3"


class TestCsvRoundTrip:
    def _stops(self):
        return [Stop("s1", "North Gate", 22.21, 113.51), Stop("s2", "Harbor", 22.25, 113.55)]

    def test_stops_round_trip(self, tmp_path):
        path = tmp_path / "stops.csv"
        model.write_stops(self._stops(), path)
        first = path.read_bytes()
        model.write_stops(model.load_stops(path).values(), path)
        assert path.read_bytes() == first

    def test_routes_round_trip(self, tmp_path):
        path = tmp_path / "routes.csv"
        routes = [Route("L1-up", "up", ("s1", "s2", "s3"), 7.5, "regular"),
                  Route("L1-down", "down", ("s3", "s2", "s1"), 7.5, "express")]
        model.write_routes(routes, path)
        first = path.read_bytes()
        model.write_routes(model.load_routes(path).values(), path)
        assert path.read_bytes() == first

    def test_swipes_round_trip(self, tmp_path):
        path = tmp_path / "swipes.csv"
        swipes = [SwipeRecord("c1", 1000, "v1", "L1-up"), SwipeRecord("c2", 1010, "v1", "L1-up")]
        model.write_swipes(swipes, path)
        first = path.read_bytes()
        model.write_swipes(model.load_swipes(path), path)
        assert path.read_bytes() == first

    def test_trip_runs_round_trip(self, tmp_path):
        path = tmp_path / "avl.csv"
        runs = [TripRun("v1", "L1-up", 0, (
            StopEvent("v1", "L1-up", "s1", 1000, 1030),
            StopEvent("v1", "L1-up", "s2", 1130, 1160),
        ))]
        model.write_trip_runs(runs, path)
        first = path.read_bytes()
        model.write_trip_runs(model.load_trip_runs(path), path)
        assert path.read_bytes() == first

    def test_reader_skips_comment_lines(self, tmp_path):
        path = tmp_path / "stops.csv"
        model.write_stops(self._stops(), path, header_comment="config=deadbeef version=0.1.0")
        assert len(model.load_stops(path)) == 2

    def test_schema_error_reports_row(self, tmp_path):
        path = tmp_path / "swipes.csv"
        path.write_text("card_id,ts,vehicle_id,route_id\nc1,-5,v1,r1\n")
        with pytest.raises(model.SchemaError, match="row 2"):
            model.load_swipes(path)
