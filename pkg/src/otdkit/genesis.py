"""Deterministic synthetic-city simulator with a ground-truth ledger.

Generates a connected route network, a passenger population with closed chain
templates anchored at home, clean AFC/AVL logs for any number of days, and a
corruption pass (per-vehicle clock offsets, burst deletion of stop events).
Every emitted record maps back to a ledger entry so recovery stages can be
scored exactly.
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace

import numpy as np

from .model import (
    CardId, Route, RouteId, ScheduleEntry, Stop, StopEvent, StopId, SwipeRecord,
    TripRun, VehicleId, distance,
)


class ConfigError(ValueError):
    """Raised when a city configuration cannot be realized."""


DAY_S = 86400
EPOCH = 18519 * DAY_S  # aligned to a day boundary


@dataclass(frozen=True)
class CityConfig:
    rng_seed: int = 7
    n_stops: int = 40
    n_routes: int = 5                 # physical lines; each yields up+down
    n_passengers: int = 100
    n_days: int = 10
    extent_km: float = 18.0
    seg_time_bounds_s: tuple[float, float] = (60.0, 250.0)
    seg_sigma_bounds_s: tuple[float, float] = (4.0, 14.0)
    swipe_delay_mean_s: float = 8.0
    swipe_delay_cap_s: float = 30.0
    first_swipe_at_arrival_prob: float = 0.7
    dwell_bounds_s: tuple[int, int] = (25, 35)
    service_start_h: float = 6.0
    service_hours: float = 17.0
    headway_choices_min: tuple[int, ...] = (6, 8, 10, 12, 15)
    express_lines: int = 1
    non_transit_day_rate: float = 0.3
    stage_observed_prob: float = 0.85
    max_chain_templates: int = 4
    day_congestion_sigma: float = 0.10
    min_stop_separation_m: float = 400.0
    base_lat: float = 22.30
    base_lon: float = 113.55

    def __post_init__(self):
        if self.n_stops < 4 and not (self.n_stops >= 2 and self.n_routes == 1):
            raise ConfigError("need at least 4 stops (2 for a single-route city)")
        if self.n_days < 1:
            raise ConfigError("need at least one day")
        if self.seg_sigma_bounds_s[0] < 0:
            raise ConfigError("sigma bounds must be non-negative")
        if not 0 <= self.non_transit_day_rate < 1:
            raise ConfigError("non-transit rate must be in [0, 1)")


@dataclass
class City:
    stops: dict[StopId, Stop]
    routes: dict[RouteId, Route]
    regions: dict[StopId, str]
    seg_mean: dict[tuple[RouteId, int], float]   # (route, from-index) -> seconds
    seg_sigma: dict[tuple[RouteId, int], float]
    schedule: list[ScheduleEntry]                # template day, start_ts = seconds of day

    def suburb_stops(self) -> set[StopId]:
        return {s for s, r in self.regions.items() if r != "downtown"}


@dataclass(frozen=True)
class RideLeg:
    route: RouteId
    board: StopId
    alight: StopId


@dataclass(frozen=True)
class StageTemplate:
    legs: tuple[RideLeg, ...]

    @property
    def origin(self) -> StopId:
        return self.legs[0].board

    @property
    def dest(self) -> StopId:
        return self.legs[-1].alight


@dataclass(frozen=True)
class ChainTemplate:
    chain_id: int
    stages: tuple[StageTemplate, ...]
    p_use: float
    start_mu_s: float            # seconds of day for the first boarding
    start_sigma_s: float
    activity_s: tuple[float, ...]  # dwell after each non-final stage

    def __post_init__(self):
        if not 2 <= len(self.stages) <= 4:
            raise ValueError("chains carry 2-4 stages")


@dataclass(frozen=True)
class PassengerTemplate:
    card: CardId
    home: StopId
    work: StopId | None
    region: str
    chains: tuple[ChainTemplate, ...]


@dataclass
class TruthRide:
    card: CardId
    day: int
    seq: int                    # ride order within the day
    chain_id: int
    stage_idx: int
    leg_idx: int
    vehicle: VehicleId
    route: RouteId
    trip_index: int
    board_stop: StopId
    board_arrive_ts: int
    swipe_ts: int | None        # clean swipe time; None when the stage rode unobserved
    alight_stop: StopId
    alight_ts: int
    observed: bool


@dataclass
class TruthLedger:
    passengers: dict[CardId, PassengerTemplate] = field(default_factory=dict)
    rides: list[TruthRide] = field(default_factory=list)
    offsets: dict[VehicleId, int] = field(default_factory=dict)
    deleted_events: list[tuple[VehicleId, RouteId, int, StopId, int]] = field(default_factory=list)
    fully_transit: dict[tuple[CardId, int], bool] = field(default_factory=dict)

    def write_jsonl(self, path):
        with open(path, "w") as fh:
            for card, p in sorted(self.passengers.items()):
                fh.write(json.dumps({
                    "kind": "passenger", "card": card, "home": p.home,
                    "work": p.work, "region": p.region,
                    "chains": [
                        {"chain_id": c.chain_id, "p_use": c.p_use,
                         "stages": [[(l.route, l.board, l.alight) for l in st.legs]
                                    for st in c.stages]}
                        for c in p.chains
                    ],
                }) + "\n")
            for r in self.rides:
                fh.write(json.dumps({
                    "kind": "ride", "card": r.card, "day": r.day, "seq": r.seq,
                    "chain_id": r.chain_id, "stage_idx": r.stage_idx, "leg_idx": r.leg_idx,
                    "vehicle": r.vehicle, "route": r.route, "trip_index": r.trip_index,
                    "board_stop": r.board_stop, "board_arrive_ts": r.board_arrive_ts,
                    "swipe_ts": r.swipe_ts, "alight_stop": r.alight_stop,
                    "alight_ts": r.alight_ts, "observed": r.observed,
                }) + "\n")
            for vehicle, off in sorted(self.offsets.items()):
                fh.write(json.dumps({"kind": "offset", "vehicle": vehicle, "seconds": off}) + "\n")
            for v, route, trip, stop, ts in self.deleted_events:
                fh.write(json.dumps({
                    "kind": "deleted_event", "vehicle": v, "route": route,
                    "trip_index": trip, "stop": stop, "arrive_ts": ts,
                }) + "\n")
            for (card, day), flag in sorted(self.fully_transit.items()):
                fh.write(json.dumps({
                    "kind": "day_flag", "card": card, "day": day, "fully_transit": flag,
                }) + "\n")


@dataclass
class Simulation:
    city: City
    population: list[PassengerTemplate]
    swipes: list[SwipeRecord]
    trip_runs: list[TripRun]
    ledger: TruthLedger
    n_days: int


# ---------------------------------------------------------------------------
# city generation
# ---------------------------------------------------------------------------

def _km_to_latlon(x_km: float, y_km: float, base_lat: float, base_lon: float) -> tuple[float, float]:
    lat = base_lat + y_km / 110.574
    lon = base_lon + x_km / (111.320 * math.cos(math.radians(base_lat)))
    return lat, lon


def _place_stops(cfg: CityConfig, rng) -> tuple[dict[StopId, Stop], dict[StopId, tuple[float, float]]]:
    stops: dict[StopId, Stop] = {}
    xy: dict[StopId, tuple[float, float]] = {}
    placed: list[tuple[float, float]] = []
    min_sep_km = cfg.min_stop_separation_m / 1000.0
    attempts = 0
    while len(placed) < cfg.n_stops:
        x, y = rng.uniform(0, cfg.extent_km, 2)
        attempts += 1
        if attempts > 200 * cfg.n_stops:
            min_sep_km *= 0.5
            attempts = 0
        if any((x - px) ** 2 + (y - py) ** 2 < min_sep_km ** 2 for px, py in placed):
            continue
        placed.append((x, y))
    for i, (x, y) in enumerate(placed):
        sid = f"S{i:03d}"
        lat, lon = _km_to_latlon(x, y, cfg.base_lat, cfg.base_lon)
        stops[sid] = Stop(sid, f"Stop {i}", lat, lon)
        xy[sid] = (x, y)
    return stops, xy


def _assign_regions(cfg: CityConfig, xy: dict[StopId, tuple[float, float]]) -> dict[StopId, str]:
    cx = cy = cfg.extent_km / 2
    regions = {}
    for sid, (x, y) in xy.items():
        if math.hypot(x - cx, y - cy) <= cfg.extent_km / 4:
            regions[sid] = "downtown"
        else:
            angle = math.atan2(y - cy, x - cx)
            quadrant = int(((angle + math.pi) / (math.pi / 2))) % 4
            regions[sid] = f"town_{quadrant}"
    return regions


def _corridor_stops(anchor_a, anchor_b, xy, band_km: float, max_len: int) -> list[StopId]:
    ax, ay = xy[anchor_a]
    bx, by = xy[anchor_b]
    dx, dy = bx - ax, by - ay
    norm = math.hypot(dx, dy)
    if norm == 0:
        return [anchor_a]
    picked = []
    for sid, (x, y) in xy.items():
        t = ((x - ax) * dx + (y - ay) * dy) / (norm * norm)
        if not -0.05 <= t <= 1.05:
            continue
        px, py = ax + t * dx, ay + t * dy
        if math.hypot(x - px, y - py) <= band_km:
            picked.append((t, sid))
    picked.sort()
    ordered = [sid for _, sid in picked]
    if len(ordered) > max_len:
        keep = {0, len(ordered) - 1}
        step = (len(ordered) - 1) / (max_len - 1)
        keep.update(round(i * step) for i in range(max_len))
        ordered = [s for i, s in enumerate(ordered) if i in keep]
    return ordered


def generate_city(cfg: CityConfig) -> City:
    """Build a connected route network with per-segment travel-time models."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.rng_seed, 0]))
    stops, xy = _place_stops(cfg, rng)
    regions = _assign_regions(cfg, xy)
    ids = sorted(stops)

    if cfg.n_stops < cfg.n_routes + 1:
        raise ConfigError("too few stops for the requested route count")

    line_paths: list[list[StopId]] = []
    covered: set[StopId] = set()
    for k in range(cfg.n_routes):
        if k == 0:
            # span the extent with the most distant pair
            best = max(
                ((distance(stops[a].position, stops[b].position), a, b)
                 for a in ids for b in ids if a < b),
                key=lambda t: t[0],
            )
            a, b = best[1], best[2]
        else:
            anchors = sorted(covered)
            a = anchors[int(rng.integers(len(anchors)))]
            far = sorted(ids, key=lambda s: -((xy[s][0] - xy[a][0]) ** 2 + (xy[s][1] - xy[a][1]) ** 2))
            b = far[int(rng.integers(min(5, len(far))))]
        band = cfg.extent_km / 6
        path = _corridor_stops(a, b, xy, band, max_len=25)
        while len(path) < min(4, cfg.n_stops):
            band *= 1.5
            path = _corridor_stops(a, b, xy, band, max_len=25)
        line_paths.append(path)
        covered.update(path)

    # attach uncovered stops to the closest line at the least-detour position
    for sid in ids:
        if sid in covered:
            continue
        best = None
        for li, path in enumerate(line_paths):
            for pos in range(1, len(path)):
                u, v = path[pos - 1], path[pos]
                detour = (
                    distance(stops[u].position, stops[sid].position)
                    + distance(stops[sid].position, stops[v].position)
                    - distance(stops[u].position, stops[v].position)
                )
                if best is None or detour < best[0]:
                    best = (detour, li, pos)
        _, li, pos = best
        line_paths[li].insert(pos, sid)
        covered.add(sid)

    routes: dict[RouteId, Route] = {}
    seg_mean: dict[tuple[RouteId, int], float] = {}
    seg_sigma: dict[tuple[RouteId, int], float] = {}

    def add_route(rid, path, headway, speed_class):
        speed_mps = (30.0 if speed_class == "express" else 20.0) / 3.6
        for direction, seq in (("up", path), ("down", list(reversed(path)))):
            full_id = f"{rid}-{direction}"
            routes[full_id] = Route(full_id, direction, tuple(seq), headway, speed_class)
            for i in range(len(seq) - 1):
                d = distance(stops[seq[i]].position, stops[seq[i + 1]].position)
                mean = float(np.clip(d / speed_mps + rng.normal(0, 15),
                                     cfg.seg_time_bounds_s[0], cfg.seg_time_bounds_s[1]))
                seg_mean[(full_id, i)] = mean
                seg_sigma[(full_id, i)] = float(rng.uniform(*cfg.seg_sigma_bounds_s))

    for k, path in enumerate(line_paths):
        headway = float(rng.choice(cfg.headway_choices_min))
        add_route(f"L{k}", path, headway, "regular")
        if k < cfg.express_lines and len(path) >= 6:
            express = [path[0]] + path[1:-1:2] + [path[-1]]
            add_route(f"X{k}", express, float(rng.choice(cfg.headway_choices_min)), "express")

    # connectivity over shared stops
    parent = {s: s for s in covered}

    def find(s):
        while parent[s] != s:
            parent[s] = parent[parent[s]]
            s = parent[s]
        return s

    for route in routes.values():
        for u, v in zip(route.stops, route.stops[1:]):
            parent[find(u)] = find(v)
    if len({find(s) for s in covered}) != 1:
        raise ConfigError("route network is not connected")

    schedule = _build_schedule(cfg, routes, seg_mean, rng)
    return City(stops, routes, regions, seg_mean, seg_sigma, schedule)


def _build_schedule(cfg, routes, seg_mean, rng) -> list[ScheduleEntry]:
    entries = []
    start_s = int(cfg.service_start_h * 3600)
    end_s = int((cfg.service_start_h + cfg.service_hours) * 3600)
    for rid in sorted(routes):
        route = routes[rid]
        cycle = sum(seg_mean[(rid, i)] for i in range(len(route.stops) - 1))
        cycle += 30 * len(route.stops) + 600
        headway_s = int(route.headway_min * 60)
        n_veh = max(1, math.ceil(cycle / headway_s))
        trip_counter = defaultdict(int)
        for k, t in enumerate(range(start_s, end_s, headway_s)):
            veh = f"V-{rid}-{k % n_veh}"
            entries.append(ScheduleEntry(veh, rid, trip_counter[veh], t))
            trip_counter[veh] += 1
    return entries


# ---------------------------------------------------------------------------
# population
# ---------------------------------------------------------------------------

class TransitRouter:
    """Minimal ride-path search over the directed route network."""

    def __init__(self, city: City):
        self.city = city
        self.serving: dict[StopId, list[tuple[RouteId, int]]] = defaultdict(list)
        for rid in sorted(city.routes):
            for idx, sid in enumerate(city.routes[rid].stops):
                self.serving[sid].append((rid, idx))

    def direct_legs(self, a: StopId, b: StopId) -> list[RideLeg]:
        legs = []
        for rid, ia in self.serving.get(a, ()):
            ib = self.city.routes[rid].index_of(b)
            if ib > ia:
                legs.append(RideLeg(rid, a, b))
        return legs

    def find_path(self, a: StopId, b: StopId, max_rides: int = 3) -> list[RideLeg] | None:
        """Breadth-first search over same-stop transfers; min-ride path."""
        if a == b:
            return None
        frontier = [(a, [])]
        seen = {a: 0}
        for depth in range(1, max_rides + 1):
            nxt = []
            for stop, legs in frontier:
                for rid, idx in self.serving.get(stop, ()):
                    stops = self.city.routes[rid].stops
                    for j in range(idx + 1, len(stops)):
                        target = stops[j]
                        if target == b:
                            return legs + [RideLeg(rid, stop, target)]
                        if seen.get(target, 99) <= depth:
                            continue
                        seen[target] = depth
                        nxt.append((target, legs + [RideLeg(rid, stop, target)]))
            frontier = nxt
        return None


def _truncated_exp(rng, mean: float, cap: float) -> float:
    val = rng.exponential(mean)
    return min(val, cap)


def generate_population(cfg: CityConfig, city: City) -> list[PassengerTemplate]:
    """Sample passengers with home/work anchors and 1-5 closed chain templates."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.rng_seed, 1]))
    router = TransitRouter(city)
    ids = sorted(city.stops)
    population = []
    chain_counter = 0
    for p in range(cfg.n_passengers):
        home = work = None
        for attempt in range(100):
            home = ids[int(rng.integers(len(ids)))]
            candidates = [s for s in ids
                          if 2000 <= distance(city.stops[home].position, city.stops[s].position)]
            if not candidates:
                continue
            work = candidates[int(rng.integers(len(candidates)))]
            go = router.find_path(home, work)
            back = router.find_path(work, home)
            if go and back:
                break
        else:
            raise ConfigError(f"no feasible commute found for passenger {p}")

        chains = []
        commute = ChainTemplate(
            chain_id=chain_counter,
            stages=(StageTemplate(tuple(go)), StageTemplate(tuple(back))),
            p_use=float((1 - cfg.non_transit_day_rate) * rng.uniform(0.55, 0.9)),
            start_mu_s=float(rng.uniform(6.8, 8.6) * 3600),
            start_sigma_s=600.0,
            activity_s=(float(rng.uniform(8.0, 9.5) * 3600),),
        )
        chain_counter += 1
        chains.append(commute)

        n_extra = int(rng.integers(0, cfg.max_chain_templates - 1 + 1))
        for _ in range(n_extra):
            extra = _sample_leisure_chain(rng, router, city, home, chain_counter, cfg)
            if extra is not None:
                chains.append(extra)
                chain_counter += 1

        population.append(PassengerTemplate(
            card=f"P{p:05d}", home=home, work=work,
            region=city.regions[home], chains=tuple(chains),
        ))
    return population


def _sample_leisure_chain(rng, router, city, home, chain_id, cfg) -> ChainTemplate | None:
    ids = sorted(city.stops)
    n_stages = int(rng.integers(2, 5))
    anchors = [home]
    for _ in range(n_stages - 1):
        for attempt in range(30):
            s = ids[int(rng.integers(len(ids)))]
            if s != anchors[-1] and distance(
                city.stops[anchors[-1]].position, city.stops[s].position
            ) >= 1000:
                anchors.append(s)
                break
        else:
            return None
    stages = []
    waypoints = anchors + [home]
    for a, b in zip(waypoints, waypoints[1:]):
        path = router.find_path(a, b)
        if path is None:
            return None
        stages.append(StageTemplate(tuple(path)))
    n = len(stages)
    return ChainTemplate(
        chain_id=chain_id,
        stages=tuple(stages),
        p_use=float((1 - cfg.non_transit_day_rate) * rng.uniform(0.05, 0.35)),
        start_mu_s=float(rng.uniform(9.0, 16.0) * 3600),
        start_sigma_s=1800.0,
        activity_s=tuple(float(rng.uniform(0.5, 2.5) * 3600) for _ in range(n - 1)),
    )


# ---------------------------------------------------------------------------
# day simulation
# ---------------------------------------------------------------------------

def _tod_factor(sec_of_day: float) -> float:
    h = sec_of_day / 3600.0
    return 1.0 + 0.2 * math.exp(-((h - 8.0) / 1.2) ** 2) + 0.2 * math.exp(-((h - 18.0) / 1.2) ** 2)


def _realize_trip_runs(city: City, day: int, rng, cfg: CityConfig) -> list[TripRun]:
    day_factor = {}
    runs = []
    for entry in city.schedule:
        route = city.routes[entry.route]
        line = route.line
        if (line, day) not in day_factor:
            day_factor[(line, day)] = math.exp(rng.normal(0.0, cfg.day_congestion_sigma))
        g_day = day_factor[(line, day)]
        g_trip = g_day * _tod_factor(entry.start_ts) * math.exp(rng.normal(0.0, 0.04))
        t = EPOCH + day * DAY_S + entry.start_ts
        events = []
        for i, stop in enumerate(route.stops):
            arrive = int(round(t))
            dwell = int(rng.integers(cfg.dwell_bounds_s[0], cfg.dwell_bounds_s[1] + 1))
            depart = arrive + dwell
            events.append(StopEvent(entry.vehicle, entry.route, stop, arrive, depart))
            if i < len(route.stops) - 1:
                seg = max(40.0, rng.normal(city.seg_mean[(entry.route, i)] * g_trip,
                                           city.seg_sigma[(entry.route, i)]))
                t = depart + seg
        runs.append(TripRun(entry.vehicle, entry.route, entry.trip_index, tuple(events)))
    return runs


class _RunIndex:
    """Boarding lookup: next departure of a route at a stop after time t."""

    def __init__(self, runs: list[TripRun]):
        self.by_route: dict[RouteId, list[TripRun]] = defaultdict(list)
        for run in runs:
            self.by_route[run.route].append(run)
        for route_runs in self.by_route.values():
            route_runs.sort(key=lambda r: r.events[0].arrive_ts)
        self._departs: dict[tuple[RouteId, StopId], tuple[np.ndarray, list[TripRun]]] = {}

    def next_boarding(self, route: RouteId, stop: StopId, t: float):
        key = (route, stop)
        if key not in self._departs:
            runs = [r for r in self.by_route.get(route, ())
                    if any(e.stop == stop for e in r.events)]
            departs = np.array([
                next(e.depart_ts for e in r.events if e.stop == stop) for r in runs
            ])
            order = np.argsort(departs, kind="stable")
            self._departs[key] = (departs[order], [runs[i] for i in order])
        departs, runs = self._departs[key]
        idx = int(np.searchsorted(departs, t))
        if idx >= len(runs):
            return None
        return runs[idx]


def simulate_days(
    city: City,
    population: list[PassengerTemplate],
    n_days: int,
    cfg: CityConfig,
) -> Simulation:
    """Run the city for ``n_days`` and emit clean logs plus the truth ledger."""
    ledger = TruthLedger()
    for p in population:
        ledger.passengers[p.card] = p
    all_runs: list[TripRun] = []
    boardings: dict[tuple[VehicleId, RouteId, int, StopId, int], list] = defaultdict(list)

    for day in range(n_days):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.rng_seed, 2, day]))
        runs = _realize_trip_runs(city, day, rng, cfg)
        all_runs.extend(runs)
        index = _RunIndex(runs)
        for passenger in population:
            _simulate_passenger_day(passenger, day, index, rng, cfg, ledger, boardings)

    swipes = _emit_swipes(boardings, np.random.default_rng(np.random.SeedSequence([cfg.rng_seed, 3])), cfg, ledger)
    swipes.sort(key=lambda s: (s.ts, s.card))
    all_runs.sort(key=lambda r: (r.vehicle, r.events[0].arrive_ts))
    return Simulation(city, population, swipes, all_runs, ledger, n_days)


def _simulate_passenger_day(passenger, day, index, rng, cfg, ledger, boardings):
    day_rides = []
    fully_transit = True
    used_any = False
    t_cursor = None
    for chain in passenger.chains:
        if rng.random() >= chain.p_use:
            continue
        used_any = True
        t = EPOCH + day * DAY_S + max(4 * 3600.0, rng.normal(chain.start_mu_s, chain.start_sigma_s))
        if t_cursor is not None:
            t = max(t, t_cursor + 900)
        for stage_idx, stage in enumerate(chain.stages):
            observed = bool(rng.random() < cfg.stage_observed_prob)
            if not observed:
                fully_transit = False
            for leg_idx, leg in enumerate(stage.legs):
                run = index.next_boarding(leg.route, leg.board, t)
                if run is None:
                    fully_transit = False
                    break
                board_ev = next(e for e in run.events if e.stop == leg.board)
                alight_ev = next(e for e in run.events if e.stop == leg.alight)
                ride = TruthRide(
                    card=passenger.card, day=day, seq=len(day_rides),
                    chain_id=chain.chain_id, stage_idx=stage_idx, leg_idx=leg_idx,
                    vehicle=run.vehicle, route=run.route, trip_index=run.trip_index,
                    board_stop=leg.board, board_arrive_ts=board_ev.arrive_ts,
                    swipe_ts=None, alight_stop=leg.alight, alight_ts=alight_ev.arrive_ts,
                    observed=observed,
                )
                day_rides.append(ride)
                if observed:
                    boardings[(run.vehicle, run.route, run.trip_index, leg.board, board_ev.arrive_ts)].append(ride)
                t = alight_ev.arrive_ts + 60
            else:
                if stage_idx < len(chain.stages) - 1:
                    t += chain.activity_s[stage_idx]
                continue
            break
        t_cursor = t
    if used_any:
        ledger.fully_transit[(passenger.card, day)] = fully_transit
        ledger.rides.extend(day_rides)


def _emit_swipes(boardings, rng, cfg, ledger) -> list[SwipeRecord]:
    swipes = []
    for key in sorted(boardings):
        vehicle, route, trip_index, stop, arrive_ts = key
        rides = boardings[key]
        if rng.random() < cfg.first_swipe_at_arrival_prob:
            delay = 0.0
        else:
            delay = _truncated_exp(rng, cfg.swipe_delay_mean_s, cfg.swipe_delay_cap_s)
        for i, ride in enumerate(rides):
            if i > 0:
                delay = min(delay + rng.uniform(1.0, 10.0), cfg.swipe_delay_cap_s)
            ts = arrive_ts + int(round(delay))
            ride.swipe_ts = ts
            swipes.append(SwipeRecord(ride.card, ts, vehicle, route))
    return swipes


# ---------------------------------------------------------------------------
# corruption
# ---------------------------------------------------------------------------

def sample_offsets(vehicles, rng) -> dict[VehicleId, int]:
    """Per-vehicle clock offsets: ~35% small (0-5 min), the rest 30-35 min."""
    offsets = {}
    for v in sorted(vehicles):
        magnitude = int(rng.uniform(0, 300)) if rng.random() < 0.35 else int(rng.uniform(1800, 2100))
        sign = 1 if rng.random() < 0.5 else -1
        offsets[v] = sign * magnitude
    return offsets


# burst length pmf: q chosen so 90% of bursts span <= 4 stops
_BURST_Q = 9.0 ** -0.25
_BURST_PMF = np.array([_BURST_Q ** k for k in range(8)])
_BURST_PMF /= _BURST_PMF.sum()
_BURST_MEAN = float(np.dot(np.arange(1, 9), _BURST_PMF))


def corrupt(
    sim: Simulation,
    offsets: dict[VehicleId, int] | None = None,
    loss_rate: float = 0.0,
    rng=None,
    loss_hotspots: dict[StopId, float] | None = None,
    max_burst: int = 8,
) -> Simulation:
    """Degrade clean logs: shift swipe clocks per vehicle, burst-delete stop events.

    Deletion bursts run over consecutive stops of one trip; the burst-length
    distribution puts 90% of bursts within 4 stops. ``loss_hotspots`` multiplies
    the burst-start probability at specific stops.
    """
    if not 0 <= loss_rate < 1:
        raise ValueError("loss rate must be in [0, 1)")
    rng = rng or np.random.default_rng(0)
    offsets = offsets or {}
    swipes = [
        replace(s, ts=s.ts + offsets.get(s.vehicle, 0)) if offsets.get(s.vehicle, 0) else s
        for s in sim.swipes
    ]
    ledger = sim.ledger
    ledger.offsets.update(offsets)

    p_start = loss_rate / _BURST_MEAN if loss_rate > 0 else 0.0
    new_runs = []
    for run in sim.trip_runs:
        if p_start == 0.0:
            new_runs.append(run)
            continue
        keep = np.ones(len(run.events), dtype=bool)
        i = 0
        while i < len(run.events):
            rate = p_start
            if loss_hotspots:
                rate *= loss_hotspots.get(run.events[i].stop, 1.0)
            if rng.random() < rate:
                burst = min(
                    int(rng.choice(np.arange(1, 9), p=_BURST_PMF)),
                    max_burst, len(run.events) - i,
                )
                keep[i:i + burst] = False
                for j in range(i, i + burst):
                    ev = run.events[j]
                    ledger.deleted_events.append(
                        (run.vehicle, run.route, run.trip_index, ev.stop, ev.arrive_ts)
                    )
                i += burst
            else:
                i += 1
        kept = tuple(ev for ev, k in zip(run.events, keep) if k)
        if kept:
            new_runs.append(TripRun(run.vehicle, run.route, run.trip_index, kept))
    return Simulation(sim.city, sim.population, swipes, new_runs, ledger, sim.n_days)


# ---------------------------------------------------------------------------
# fast observation path (no vehicles): per-day observed stage tables
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ObservedStage:
    card: CardId
    day: int
    seq: int
    chain_id: int
    stage_idx: int
    origin: StopId
    dest: StopId
    board_ts: int
    alight_ts: int


def simulate_observation_table(
    population: list[PassengerTemplate],
    n_days: int,
    seed: int,
    stage_observed_prob: float = 0.85,
) -> list[ObservedStage]:
    """Cheap stage-level observation sampling without vehicle dynamics.

    Stage times come straight from the chain template clock; used by the chain
    mining experiments where only visit order and rough times matter.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 4]))
    out = []
    for passenger in population:
        for day in range(n_days):
            seq = 0
            t_cursor = None
            for chain in passenger.chains:
                if rng.random() >= chain.p_use:
                    continue
                t = EPOCH + day * DAY_S + max(4 * 3600.0, rng.normal(chain.start_mu_s, chain.start_sigma_s))
                if t_cursor is not None:
                    t = max(t, t_cursor + 900)
                for stage_idx, stage in enumerate(chain.stages):
                    ride_s = 600.0 * len(stage.legs)
                    if rng.random() < stage_observed_prob:
                        out.append(ObservedStage(
                            passenger.card, day, seq, chain.chain_id, stage_idx,
                            stage.origin, stage.dest, int(t), int(t + ride_s),
                        ))
                        seq += 1
                    t += ride_s
                    if stage_idx < len(chain.stages) - 1:
                        t += chain.activity_s[stage_idx]
                t_cursor = t
    out.sort(key=lambda o: (o.card, o.day, o.board_ts))
    return out
