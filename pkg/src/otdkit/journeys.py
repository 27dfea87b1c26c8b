"""Passenger O-T-D trajectory reconstruction from matched swipes.

Alighting inference runs in four passes: continuous travel (next boarding as
the reference), candidate-set construction for records broken by missing data,
day-closure for each day's last ride (with a next-day reference override and a
home-estimate fallback), and an empirical maximum-probability pass restricted
to similar travel days. Resolved rides are then merged into journeys by the
four transfer constraints (distance, time, repeated line, purpose), with
short activities flagged when only the first two hold.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage

from .model import Route, RouteId, Stop, StopId, SwipeRecord, TripRun, distance

DAY_S = 86400


@dataclass
class Trip:
    card: str
    day: int
    vehicle: str
    route: RouteId
    board_stop: StopId | None
    board_ts: int
    alight_stop: StopId | None = None
    alight_ts: int | None = None
    alight_method: str = "unresolved"
    candidates: tuple[tuple[StopId, int], ...] = ()   # (stop, arrive_ts) downstream

    @property
    def resolved(self) -> bool:
        return self.alight_stop is not None


@dataclass
class Journey:
    card: str
    day: int
    trips: list[Trip]
    short_activity_after: bool = False   # gap to the next journey was a short activity

    @property
    def complete(self) -> bool:
        return all(t.resolved for t in self.trips) and all(
            t.board_stop is not None for t in self.trips)

    @property
    def origin(self) -> StopId | None:
        return self.trips[0].board_stop

    @property
    def dest(self) -> StopId | None:
        return self.trips[-1].alight_stop

    @property
    def stage_labels(self) -> list[str]:
        n = len(self.trips)
        return ["O"] + ["T"] * (n - 1) + ["D"]

    def to_dict(self) -> dict:
        return {
            "card": self.card,
            "day": self.day,
            "origin": self.origin,
            "dest": self.dest,
            "stages": self.stage_labels,
            "short_activity_after": self.short_activity_after,
            "complete": self.complete,
            "trips": [
                {
                    "vehicle": t.vehicle, "route": t.route,
                    "board_stop": t.board_stop, "board_ts": t.board_ts,
                    "alight_stop": t.alight_stop, "alight_ts": t.alight_ts,
                    "method": t.alight_method,
                }
                for t in self.trips
            ],
        }


class _VehicleRuns:
    def __init__(self, runs: list[TripRun]):
        self.by_vehicle: dict[str, list[TripRun]] = defaultdict(list)
        for run in runs:
            self.by_vehicle[run.vehicle].append(run)
        self.starts: dict[str, list[int]] = {}
        for v, lst in self.by_vehicle.items():
            lst.sort(key=lambda r: r.events[0].arrive_ts)
            self.starts[v] = [r.events[0].arrive_ts for r in lst]

    def locate(self, vehicle: str, stop: StopId, ts: int) -> tuple[TripRun, int] | None:
        """Run and event index whose boarding window [arrive, next arrive) holds ts."""
        runs = self.by_vehicle.get(vehicle)
        if not runs:
            return None
        idx = bisect_right(self.starts[vehicle], ts) - 1
        for k in (idx, idx + 1, idx - 1):
            if 0 <= k < len(runs):
                run = runs[k]
                for i, ev in enumerate(run.events):
                    if ev.stop != stop or ev.arrive_ts > ts:
                        continue
                    nxt = run.events[i + 1].arrive_ts if i + 1 < len(run.events) else None
                    if nxt is None or ts < nxt:
                        return run, i
        return None


class StopEquivalence:
    """Union-find over the 'within 300 m or adjacent on a line' relation."""

    def __init__(self, stops: dict[StopId, Stop], routes: dict[RouteId, Route],
                 radius_m: float = 300.0):
        self.parent = {s: s for s in stops}
        ids = sorted(stops)
        for i, a in enumerate(ids):
            for b in ids[i + 1:]:
                if distance(stops[a].position, stops[b].position) < radius_m:
                    self._union(a, b)
        for route in routes.values():
            for u, v in zip(route.stops, route.stops[1:]):
                self._union(u, v)

    def _find(self, s):
        while self.parent[s] != s:
            self.parent[s] = self.parent[self.parent[s]]
            s = self.parent[s]
        return s

    def _union(self, a, b):
        self.parent[self._find(a)] = self._find(b)

    def same(self, a: StopId, b: StopId) -> bool:
        return self._find(a) == self._find(b)

    def key(self, s: StopId) -> StopId:
        return self._find(s)


def day_similarity(day_a: set[StopId], day_b: set[StopId], equiv: StopEquivalence) -> float:
    """Share of equivalence classes visited on both days among all visited."""
    if not day_a or not day_b:
        raise ValueError("day sets must be non-empty")
    classes_a = {equiv.key(s) for s in day_a}
    classes_b = {equiv.key(s) for s in day_b}
    union = classes_a | classes_b
    both = classes_a & classes_b
    return len(both) / len(union)


def estimate_home(first_boardings: list[tuple[StopId, int]]) -> StopId:
    """Modal first-boarding stop; ties broken by earliest median swipe time."""
    if not first_boardings:
        raise ValueError("no observed days")
    counts = Counter(stop for stop, _ in first_boardings)
    top = max(counts.values())
    tied = [s for s, c in counts.items() if c == top]
    if len(tied) == 1:
        return tied[0]
    medians = {}
    for s in tied:
        tods = sorted(ts % DAY_S for stop, ts in first_boardings if stop == s)
        medians[s] = tods[len(tods) // 2]
    return min(tied, key=lambda s: (medians[s], s))


def occupancy(segment_ridership: float, vehicle_count: int, capacity: int = 30) -> float | None:
    """Load factor of a segment over an observation window; None without service."""
    if vehicle_count <= 0:
        return None
    return segment_ridership / (capacity * vehicle_count)


@dataclass
class JourneyBuilderParams:
    alight_walk_radius_m: float = 700.0
    transfer_radius_downtown_m: float = 500.0
    transfer_radius_suburb_m: float = 700.0
    max_missed_buses: int = 3
    walk_speed_mps: float = 1.2
    day_similarity_eps: float = 0.7
    equivalence_radius_m: float = 300.0
    last_trip_far_km: float = 10.0
    last_trip_cutoff_s: int = 30600
    max_day_gap: int = 2


class JourneyBuilder:
    def __init__(
        self,
        stops: dict[StopId, Stop],
        routes: dict[RouteId, Route],
        runs: list[TripRun],
        suburb_stops: set[StopId] | None = None,
        params: JourneyBuilderParams | None = None,
    ):
        self.stops = stops
        self.routes = routes
        self.params = params or JourneyBuilderParams()
        self.suburb = suburb_stops or set()
        self.runs = _VehicleRuns(runs)
        self.equiv = StopEquivalence(stops, routes, self.params.equivalence_radius_m)
        # arrivals per stop for the wait-window bus count
        self.stop_arrivals: dict[StopId, list[tuple[int, RouteId, str]]] = defaultdict(list)
        for run in runs:
            for ev in run.events:
                self.stop_arrivals[ev.stop].append((ev.arrive_ts, run.route, run.vehicle))
        for lst in self.stop_arrivals.values():
            lst.sort()

    # -- trip assembly ------------------------------------------------------

    def build_trips(self, matched: list[SwipeRecord]) -> dict[str, dict[int, list[Trip]]]:
        per_card: dict[str, dict[int, list[Trip]]] = defaultdict(lambda: defaultdict(list))
        for s in sorted(matched, key=lambda m: (m.card, m.ts)):
            trip = Trip(s.card, s.ts // DAY_S, s.vehicle, s.route, s.boarding_stop, s.ts)
            per_card[s.card][trip.day].append(trip)
        return per_card

    def _downstream(self, trip: Trip, t_hi: int | None) -> tuple[tuple[StopId, int], ...]:
        if trip.board_stop is None:
            return ()
        hit = self.runs.locate(trip.vehicle, trip.board_stop, trip.board_ts)
        if hit is None:
            return ()
        run, i = hit
        out = []
        for ev in run.events[i + 1:]:
            if t_hi is not None and ev.arrive_ts >= t_hi:
                break
            out.append((ev.stop, ev.arrive_ts))
        return tuple(out)

    def _dist(self, a: StopId, b: StopId) -> float:
        return distance(self.stops[a].position, self.stops[b].position)

    # -- the four alighting passes -------------------------------------------

    def infer_alighting_continuous(self, trip: Trip, next_board: StopId) -> bool:
        for stop, ts in trip.candidates:
            if stop == next_board:
                trip.alight_stop, trip.alight_ts = stop, ts
                trip.alight_method = "continuous"
                return True
        best = None
        for stop, ts in trip.candidates:
            d = self._dist(stop, next_board)
            if d < self.params.alight_walk_radius_m and (best is None or d < best[0]):
                best = (d, stop, ts)
        if best is not None:
            trip.alight_stop, trip.alight_ts = best[1], best[2]
            trip.alight_method = "continuous"
            return True
        return False

    def infer_last_alighting(self, trip: Trip, reference: StopId, method: str) -> bool:
        best = None
        for stop, ts in trip.candidates:
            d = self._dist(stop, reference)
            if best is None or d < best[0]:
                best = (d, stop, ts)
        if best is None:
            return False
        trip.alight_stop, trip.alight_ts = best[1], best[2]
        trip.alight_method = method
        return True

    def infer_alighting_probabilistic(self, trip: Trip, evidence: list[Trip],
                                      visit_counts: Counter) -> bool:
        if not trip.candidates:
            return False
        board_key = self.equiv.key(trip.board_stop) if trip.board_stop else None
        alight_counts: Counter = Counter()
        for ev in evidence:
            if not ev.resolved or ev.board_stop is None:
                continue
            if board_key is not None and self.equiv.key(ev.board_stop) != board_key:
                continue
            alight_counts[self.equiv.key(ev.alight_stop)] += 1
        scored = []
        for stop, ts in trip.candidates:
            scored.append((alight_counts.get(self.equiv.key(stop), 0), stop, ts))
        top = max(s[0] for s in scored)
        if top == 0:
            return False
        leaders = [s for s in scored if s[0] == top]
        if len(leaders) > 1:
            # non-equivalent ties fall back to raw visit frequency
            leaders.sort(key=lambda s: (-visit_counts.get(s[1], 0), s[1]))
        _, stop, ts = leaders[0]
        trip.alight_stop, trip.alight_ts = stop, ts
        trip.alight_method = "probabilistic"
        return True

    def resolve_card(self, days: dict[int, list[Trip]]) -> None:
        ordered_days = sorted(days)
        # passes 1 + 2: consecutive records and candidate sets
        for day in ordered_days:
            trips = days[day]
            for k, trip in enumerate(trips):
                t_hi = trips[k + 1].board_ts if k + 1 < len(trips) else None
                trip.candidates = self._downstream(trip, t_hi)
            for k in range(len(trips) - 1):
                trip, nxt = trips[k], trips[k + 1]
                if trip.board_stop is None or nxt.board_stop is None:
                    continue
                if trip.board_stop == nxt.board_stop:
                    continue
                self.infer_alighting_continuous(trip, nxt.board_stop)

        firsts = [(days[d][0].board_stop, days[d][0].board_ts)
                  for d in ordered_days if days[d][0].board_stop]
        home = estimate_home(firsts) if firsts else None

        # pass 3: last ride of each multi-ride day
        for di, day in enumerate(ordered_days):
            trips = days[day]
            if len(trips) < 2:
                continue
            last = trips[-1]
            if last.resolved or not last.candidates:
                continue
            reference, method = None, None
            if di + 1 < len(ordered_days):
                nd = ordered_days[di + 1]
                if nd - day <= self.params.max_day_gap:
                    nb = days[nd][0]
                    if (nb.board_stop is not None and trips[0].board_stop is not None
                            and nb.board_ts % DAY_S <= self.params.last_trip_cutoff_s
                            and self._dist(nb.board_stop, trips[0].board_stop)
                            > self.params.last_trip_far_km * 1000):
                        reference, method = nb.board_stop, "closed_chain"
            if reference is None and trips[0].board_stop is not None:
                reference, method = trips[0].board_stop, "closed_chain"
            if reference is None and home is not None:
                reference, method = home, "home_ref"
            if reference is not None:
                self.infer_last_alighting(last, reference, method)

        # pass 4: similar-day empirical maximum
        day_sets = {d: {t.board_stop for t in days[d] if t.board_stop}
                    for d in ordered_days}
        visit_counts: Counter = Counter()
        for s in day_sets.values():
            visit_counts.update(s)
        for day in ordered_days:
            unresolved = [t for t in days[day] if not t.resolved and t.candidates]
            if not unresolved or not day_sets[day]:
                continue
            similar = [
                d for d in ordered_days
                if day_sets[d] and day_similarity(day_sets[day], day_sets[d], self.equiv)
                >= self.params.day_similarity_eps
            ]
            evidence = [t for d in similar for t in days[d] if t.resolved]
            for trip in unresolved:
                self.infer_alighting_probabilistic(trip, evidence, visit_counts)

    # -- transfer identification ---------------------------------------------

    def _transfer_radius(self, a: StopId, b: StopId) -> float:
        if a in self.suburb or b in self.suburb:
            return self.params.transfer_radius_suburb_m
        return self.params.transfer_radius_downtown_m

    def _missed_buses(self, stop: StopId, t_lo: float, t_hi: float,
                      dest: StopId | None, boarded_vehicle: str) -> int:
        """Qualifying arrivals the passenger let pass while waiting at `stop`."""
        arrivals = self.stop_arrivals.get(stop, [])
        lo = bisect_right(arrivals, (int(math.floor(t_lo)), "", ""))
        count = 0
        for ts, route_id, vehicle in arrivals[lo:]:
            if ts >= t_hi:
                break
            if vehicle == boarded_vehicle:
                continue
            route = self.routes.get(route_id)
            if route is None:
                continue
            if dest is not None:
                ib, ia = route.index_of(stop), route.index_of(dest)
                if ib < 0 or ia < 0 or ia <= ib:
                    continue
            count += 1
        return count

    def _gap_kind(self, prev: Trip, nxt: Trip) -> str:
        """Classify the gap between consecutive rides.

        transfer: all four constraints hold (distance, time, distinct line,
        no comparable direct line). short_activity: distance+time hold but a
        repeated line or an ignored direct option breaks the transfer reading.
        boundary: anything else.
        """
        if not prev.resolved or prev.board_stop is None or nxt.board_stop is None:
            return "boundary"
        walk_d = self._dist(prev.alight_stop, nxt.board_stop)
        if walk_d > self._transfer_radius(prev.alight_stop, nxt.board_stop):
            return "boundary"
        walk_t = walk_d / self.params.walk_speed_mps
        window_lo = prev.alight_ts + walk_t
        missed = self._missed_buses(nxt.board_stop, window_lo, nxt.board_ts,
                                    nxt.alight_stop, nxt.vehicle)
        if missed > self.params.max_missed_buses:
            return "boundary"
        repeated = self.routes[prev.route].line == self.routes[nxt.route].line
        direct = self._direct_line_exists(prev, nxt)
        if repeated or direct:
            return "short_activity"
        return "transfer"

    def _direct_line_exists(self, prev: Trip, nxt: Trip) -> bool:
        """A direct line from the previous boarding to the next alighting whose
        expected wait is within twice the taken line's wait."""
        if nxt.alight_stop is None or prev.board_stop is None:
            return False
        taken_headway = self.routes[prev.route].headway_min
        for route in self.routes.values():
            ib = route.index_of(prev.board_stop)
            ia = route.index_of(nxt.alight_stop)
            if 0 <= ib < ia and route.headway_min <= 2 * taken_headway:
                return True
        return False

    def identify_stages(self, trips: list[Trip]) -> list[Journey]:
        if not trips:
            return []
        journeys: list[Journey] = []
        current = [trips[0]]
        for prev, nxt in zip(trips, trips[1:]):
            kind = self._gap_kind(prev, nxt)
            if kind == "transfer":
                current.append(nxt)
            else:
                journeys.append(Journey(prev.card, current[0].day, current,
                                        short_activity_after=(kind == "short_activity")))
                current = [nxt]
        journeys.append(Journey(trips[-1].card, current[0].day, current))
        return journeys

    # -- top level -----------------------------------------------------------

    def build(self, matched: list[SwipeRecord]) -> list[Journey]:
        per_card = self.build_trips(matched)
        journeys: list[Journey] = []
        for card in sorted(per_card):
            days = per_card[card]
            self.resolve_card(days)
            for day in sorted(days):
                journeys.extend(self.identify_stages(days[day]))
        return journeys


# ---------------------------------------------------------------------------
# ridership analytics
# ---------------------------------------------------------------------------

def route_flow_counts(journeys: list[Journey]) -> dict[RouteId, dict[StopId, list[int]]]:
    """Per route, per stop: [boarding count, alighting count] over all trips."""
    flows: dict[RouteId, dict[StopId, list[int]]] = defaultdict(lambda: defaultdict(lambda: [0, 0]))
    for j in journeys:
        for t in j.trips:
            if t.board_stop:
                flows[t.route][t.board_stop][0] += 1
            if t.alight_stop:
                flows[t.route][t.alight_stop][1] += 1
    return flows


def _trip_segments(trip: Trip, routes: dict[RouteId, Route]) -> list[tuple[StopId, StopId]]:
    route = routes.get(trip.route)
    if route is None or trip.board_stop is None or trip.alight_stop is None:
        return []
    i, j = route.index_of(trip.board_stop), route.index_of(trip.alight_stop)
    if i < 0 or j < 0 or j <= i:
        return []
    return [(route.stops[k], route.stops[k + 1]) for k in range(i, j)]


def segment_profiles(journeys: list[Journey], routes: dict[RouteId, Route],
                     window_s: int = 3600) -> dict[tuple[StopId, StopId], np.ndarray]:
    """Hourly ridership vector (24 bins) per adjacent-stop segment."""
    bins = DAY_S // window_s
    profiles: dict[tuple[StopId, StopId], np.ndarray] = {}
    for j in journeys:
        for t in j.trips:
            for seg in _trip_segments(t, routes):
                if seg not in profiles:
                    profiles[seg] = np.zeros(bins)
                profiles[seg][(t.board_ts % DAY_S) // window_s] += 1
    return profiles


def cluster_segment_profiles(
    profiles: dict[tuple[StopId, StopId], np.ndarray], k: int = 3
) -> tuple[list[tuple[StopId, StopId]], np.ndarray, np.ndarray | None]:
    """Average-linkage agglomerative clustering of segment profiles into k groups."""
    segments = sorted(profiles)
    matrix = np.array([profiles[s] for s in segments])
    if len(segments) == 1:
        return segments, np.array([1]), None
    link = linkage(matrix, method="average", metric="euclidean")
    labels = fcluster(link, t=min(k, len(segments)), criterion="maxclust")
    return segments, labels, link


def occupancy_table(
    journeys: list[Journey],
    runs: list[TripRun],
    routes: dict[RouteId, Route],
    capacity: int = 30,
) -> dict[tuple[StopId, StopId], float | None]:
    """Whole-period load factor per segment (ridership over seated capacity)."""
    riders: Counter = Counter()
    for j in journeys:
        for t in j.trips:
            for seg in _trip_segments(t, routes):
                riders[seg] += 1
    vehicles: Counter = Counter()
    for run in runs:
        for a, b in zip(run.events, run.events[1:]):
            vehicles[(a.stop, b.stop)] += 1
    return {seg: occupancy(riders.get(seg, 0), vehicles[seg], capacity)
            for seg in sorted(vehicles)}
