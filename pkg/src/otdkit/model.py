"""Core domain types shared by every stage, plus geodesic helpers and CSV I/O.

All timestamps are integer unix seconds. Identifiers are opaque strings.
Every type is an immutable value object and safe to share across workers.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

StopId = str
RouteId = str
VehicleId = str
CardId = str

EARTH_RADIUS_M = 6371008.8  # mean Earth radius


class SchemaError(ValueError):
    """Raised when an input table violates its declared schema."""


def distance(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Great-circle (haversine) distance in meters between (lat, lon) points."""
    lat1, lon1, lat2, lon2 = map(math.radians, (a[0], a[1], b[0], b[1]))
    dlat = lat2 - lat1
    dlon = lon2 - lon1
    h = math.sin(dlat / 2.0) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin(dlon / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(h)))


def bearing_angle(
    v1: tuple[tuple[float, float], tuple[float, float]],
    v2: tuple[tuple[float, float], tuple[float, float]],
) -> float:
    """Angle in degrees [0, 180] between two directed O->D displacement vectors.

    Each vector is given as ((lat_o, lon_o), (lat_d, lon_d)). Displacements are
    projected onto a local tangent plane at the mean latitude, so the result is
    meaningful at city scale.

    Raises:
        ValueError: if either vector has coincident endpoints.
    """
    comps = []
    for (o, d) in (v1, v2):
        mean_lat = math.radians((o[0] + d[0]) / 2.0)
        dx = (d[1] - o[1]) * math.cos(mean_lat)
        dy = d[0] - o[0]
        norm = math.hypot(dx, dy)
        if norm == 0.0:
            raise ValueError("zero-length trip vector")
        comps.append((dx / norm, dy / norm))
    dot = comps[0][0] * comps[1][0] + comps[0][1] * comps[1][1]
    dot = max(-1.0, min(1.0, dot))
    return math.degrees(math.acos(dot))


@dataclass(frozen=True)
class Stop:
    id: StopId
    name: str
    lat: float
    lon: float

    def __post_init__(self):
        if not self.id:
            raise ValueError("empty stop id")
        if abs(self.lat) > 90 or abs(self.lon) > 180:
            raise ValueError(f"stop {self.id}: coordinates out of range")

    @property
    def position(self) -> tuple[float, float]:
        return (self.lat, self.lon)


@dataclass(frozen=True)
class Route:
    """One directed route variant. `line` strips the direction suffix."""

    id: RouteId
    direction: str  # "up" | "down"
    stops: tuple[StopId, ...]
    headway_min: float
    speed_class: str = "regular"  # "regular" | "express"

    def __post_init__(self):
        if not self.id:
            raise ValueError("empty route id")
        if self.direction not in ("up", "down"):
            raise ValueError(f"route {self.id}: bad direction {self.direction!r}")
        if len(self.stops) < 2:
            raise ValueError(f"route {self.id}: needs at least 2 stops")
        for a, b in zip(self.stops, self.stops[1:]):
            if a == b:
                raise ValueError(f"route {self.id}: immediate duplicate stop {a}")
        if self.headway_min <= 0:
            raise ValueError(f"route {self.id}: headway must be positive")
        if self.speed_class not in ("regular", "express"):
            raise ValueError(f"route {self.id}: bad speed class {self.speed_class!r}")

    @property
    def line(self) -> str:
        return self.id.rsplit("-", 1)[0] if "-" in self.id else self.id

    def index_of(self, stop: StopId) -> int:
        try:
            return self.stops.index(stop)
        except ValueError:
            return -1


@dataclass(frozen=True)
class SwipeRecord:
    card: CardId
    ts: int
    vehicle: VehicleId
    route: RouteId
    boarding_stop: StopId | None = None  # filled by timesync / avlrepair

    def __post_init__(self):
        if self.ts <= 0:
            raise ValueError("swipe ts must be positive")


@dataclass(frozen=True)
class StopEvent:
    vehicle: VehicleId
    route: RouteId
    stop: StopId
    arrive_ts: int
    depart_ts: int

    def __post_init__(self):
        if self.arrive_ts > self.depart_ts:
            raise ValueError(
                f"stop event {self.vehicle}@{self.stop}: arrive after depart"
            )


@dataclass(frozen=True)
class TripRun:
    """One vehicle run from terminal to terminal on a directed route."""

    vehicle: VehicleId
    route: RouteId
    trip_index: int
    events: tuple[StopEvent, ...]

    def __post_init__(self):
        for a, b in zip(self.events, self.events[1:]):
            if a.arrive_ts >= b.arrive_ts:
                raise ValueError(
                    f"trip {self.vehicle}/{self.trip_index}: events not increasing"
                )

    @property
    def stop_ids(self) -> tuple[StopId, ...]:
        return tuple(e.stop for e in self.events)

    def is_subsequence_of(self, route_stops: Sequence[StopId]) -> bool:
        it = iter(route_stops)
        return all(s in it for s in self.stop_ids)


@dataclass(frozen=True)
class ScheduleEntry:
    vehicle: VehicleId
    route: RouteId
    trip_index: int
    start_ts: int


# ---------------------------------------------------------------------------
# CSV I/O
#
# Readers skip leading '#' comment lines (pipeline outputs embed a config-hash
# comment); writers accept an optional `header_comment`. Re-serializing a
# parsed table reproduces it byte-identically modulo column order.
# ---------------------------------------------------------------------------

STOPS_COLUMNS = ["stop_id", "name", "lat", "lon"]
ROUTES_COLUMNS = ["route_id", "direction", "headway_min", "speed_class", "stop_seq"]
SWIPES_COLUMNS = ["card_id", "ts", "vehicle_id", "route_id"]
AVL_COLUMNS = ["vehicle_id", "route_id", "trip_index", "stop_id", "arrive_ts", "depart_ts"]
SCHEDULE_COLUMNS = ["vehicle_id", "route_id", "trip_index", "start_ts"]


def _read_rows(path, required: Sequence[str]) -> list[dict]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    if reader.fieldnames is None:
        return []
    missing = set(required) - set(reader.fieldnames)
    if missing:
        raise SchemaError(f"{path}: missing columns {sorted(missing)}")
    return list(reader)


def _write_rows(path, columns: Sequence[str], rows: Iterable[Sequence], header_comment: str | None = None):
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        writer = csv.writer(fh)
        writer.writerow(columns)
        writer.writerows(rows)


def _fmt(value: float) -> str:
    """Render a float compactly; integers lose the trailing .0."""
    if float(value).is_integer():
        return str(int(value))
    return repr(float(value))


def load_stops(path) -> dict[StopId, Stop]:
    stops = {}
    for i, row in enumerate(_read_rows(path, STOPS_COLUMNS)):
        try:
            stop = Stop(row["stop_id"], row["name"], float(row["lat"]), float(row["lon"]))
        except (ValueError, KeyError) as exc:
            raise SchemaError(f"{path} row {i + 2}: {exc}") from exc
        if stop.id in stops:
            raise SchemaError(f"{path} row {i + 2}: duplicate stop id {stop.id}")
        stops[stop.id] = stop
    return stops


def write_stops(stops: Iterable[Stop], path, header_comment=None):
    rows = [(s.id, s.name, repr(s.lat), repr(s.lon)) for s in stops]
    _write_rows(path, STOPS_COLUMNS, rows, header_comment)


def load_routes(path) -> dict[RouteId, Route]:
    routes = {}
    for i, row in enumerate(_read_rows(path, ROUTES_COLUMNS)):
        try:
            route = Route(
                row["route_id"],
                row["direction"],
                tuple(row["stop_seq"].split("|")),
                float(row["headway_min"]),
                row["speed_class"],
            )
        except ValueError as exc:
            raise SchemaError(f"{path} row {i + 2}: {exc}") from exc
        if route.id in routes:
            raise SchemaError(f"{path} row {i + 2}: duplicate route id {route.id}")
        routes[route.id] = route
    return routes


def write_routes(routes: Iterable[Route], path, header_comment=None):
    rows = [
        (r.id, r.direction, _fmt(r.headway_min), r.speed_class, "|".join(r.stops))
        for r in routes
    ]
    _write_rows(path, ROUTES_COLUMNS, rows, header_comment)


def load_swipes(path) -> list[SwipeRecord]:
    swipes = []
    for i, row in enumerate(_read_rows(path, SWIPES_COLUMNS)):
        try:
            swipes.append(
                SwipeRecord(row["card_id"], int(row["ts"]), row["vehicle_id"], row["route_id"])
            )
        except ValueError as exc:
            raise SchemaError(f"{path} row {i + 2}: {exc}") from exc
    return swipes


def write_swipes(swipes: Iterable[SwipeRecord], path, header_comment=None):
    rows = [(s.card, s.ts, s.vehicle, s.route) for s in swipes]
    _write_rows(path, SWIPES_COLUMNS, rows, header_comment)


def load_trip_runs(path) -> list[TripRun]:
    """Load avl.csv into TripRuns.

    Rows of one run must be contiguous in the file (as the writer emits them);
    a new run starts whenever (vehicle, route, trip_index) changes.
    """
    runs: list[TripRun] = []
    current_key = None
    current: list[StopEvent] = []

    def flush():
        if current:
            events = tuple(sorted(current, key=lambda e: e.arrive_ts))
            runs.append(TripRun(current_key[0], current_key[1], current_key[2], events))

    for i, row in enumerate(_read_rows(path, AVL_COLUMNS)):
        try:
            ev = StopEvent(
                row["vehicle_id"], row["route_id"], row["stop_id"],
                int(row["arrive_ts"]), int(row["depart_ts"]),
            )
            key = (row["vehicle_id"], row["route_id"], int(row["trip_index"]))
        except ValueError as exc:
            raise SchemaError(f"{path} row {i + 2}: {exc}") from exc
        if key != current_key:
            flush()
            current_key, current = key, []
        current.append(ev)
    flush()
    return runs


def write_trip_runs(runs: Iterable[TripRun], path, header_comment=None):
    rows = []
    for run in runs:
        for ev in run.events:
            rows.append((run.vehicle, run.route, run.trip_index, ev.stop, ev.arrive_ts, ev.depart_ts))
    _write_rows(path, AVL_COLUMNS, rows, header_comment)


def load_schedule(path) -> list[ScheduleEntry]:
    entries = []
    for i, row in enumerate(_read_rows(path, SCHEDULE_COLUMNS)):
        try:
            entries.append(
                ScheduleEntry(row["vehicle_id"], row["route_id"], int(row["trip_index"]), int(row["start_ts"]))
            )
        except ValueError as exc:
            raise SchemaError(f"{path} row {i + 2}: {exc}") from exc
    return entries


def write_schedule(entries: Iterable[ScheduleEntry], path, header_comment=None):
    rows = [(e.vehicle, e.route, e.trip_index, e.start_ts) for e in entries]
    _write_rows(path, SCHEDULE_COLUMNS, rows, header_comment)
