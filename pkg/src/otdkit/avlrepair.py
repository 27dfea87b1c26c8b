"""Missing stop-record inference from travel-time probability models.

Gaps in a trip run are located against the route's stop list; missing arrivals
are inferred either from the first swipe observed inside the gap (most
probable station given the elapsed time) or, with no swipes, from the mode of
a conditioned Gaussian travel-time model fitted on historical runs.

Conditioning variants on the history sample:
  theta0  unconditioned
  theta1  departure time-of-day within +-start_window of the anchor departure
  theta2  anchor-to-anchor trip time within +-tolerance of the current run's
  theta3  both (rarely enough support; falls back)
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .model import Route, RouteId, StopEvent, StopId, SwipeRecord, TripRun
from .timesync import segment_swipes

DAY_S = 86400

_FALLBACKS = {
    "theta3": ("theta3", "theta2", "theta0"),
    "theta2": ("theta2", "theta0"),
    "theta1": ("theta1", "theta0"),
    "theta0": ("theta0",),
}


class UnrepairableTripError(ValueError):
    """The whole run is missing; nothing to anchor an inference on."""


class InsufficientHistoryError(ValueError):
    """Too few historical samples to fit the requested model."""


@dataclass(frozen=True)
class GapInterval:
    vehicle: str
    route: RouteId
    trip_index: int
    anchor_before: StopEvent | None
    anchor_after: StopEvent | None
    missing_stops: tuple[StopId, ...]

    @property
    def anchored(self) -> bool:
        return self.anchor_before is not None and self.anchor_after is not None


@dataclass(frozen=True)
class TravelTimeModel:
    origin: StopId
    destination: StopId
    condition: str
    mu: float
    sigma: float
    support_count: int

    def pdf(self, t: float) -> float:
        z = (t - self.mu) / self.sigma
        return math.exp(-0.5 * z * z) / (self.sigma * math.sqrt(2 * math.pi))


@dataclass(frozen=True)
class SyntheticEvent:
    vehicle: str
    route: RouteId
    trip_index: int
    stop: StopId
    arrive_ts: int
    depart_ts: int
    method: str            # "swipe" | "travel_time"
    adjusted: bool = False  # true when the isotonic pass moved it


class TravelTimeArchive:
    """Historical trip runs per route as index-aligned arrive/depart matrices."""

    def __init__(self, runs: list[TripRun], routes: dict[RouteId, Route]):
        self.routes = routes
        self._arrive: dict[RouteId, np.ndarray] = {}
        self._depart: dict[RouteId, np.ndarray] = {}
        by_route: dict[RouteId, list[TripRun]] = defaultdict(list)
        for run in runs:
            by_route[run.route].append(run)
        for rid, route_runs in by_route.items():
            route = routes.get(rid)
            if route is None:
                continue
            idx = {s: i for i, s in enumerate(route.stops)}
            arr = np.full((len(route_runs), len(route.stops)), np.nan)
            dep = np.full_like(arr, np.nan)
            for r, run in enumerate(route_runs):
                for ev in run.events:
                    i = idx.get(ev.stop)
                    if i is not None:
                        arr[r, i] = ev.arrive_ts
                        dep[r, i] = ev.depart_ts
            self._arrive[rid] = arr
            self._depart[rid] = dep
        self._cache: dict[tuple, TravelTimeModel] = {}
        self.median_dwell = self._median_dwell()

    def _median_dwell(self) -> float:
        dwells = []
        for rid in self._arrive:
            d = self._depart[rid] - self._arrive[rid]
            dwells.append(d[np.isfinite(d)])
        if not dwells or not sum(len(d) for d in dwells):
            return 30.0
        return float(np.median(np.concatenate(dwells)))

    def fit(
        self,
        route: RouteId,
        origin: StopId,
        dest: StopId,
        condition: str = "theta2",
        context: dict | None = None,
        min_support: int = 5,
        sigma_floor: float = 5.0,
    ) -> TravelTimeModel:
        """Gaussian fit of origin-depart -> dest-arrive durations under a condition.

        Context keys: ``t_s0`` (anchor departure, unix s) for theta1/theta3,
        ``s1`` and ``t_trip`` (anchor stop id and anchor-to-anchor seconds)
        for theta2/theta3.
        """
        context = context or {}
        key = (route, origin, dest, condition,
               int(context.get("t_s0", 0)) % DAY_S // 600 if "t_s0" in context else None,
               context.get("s1"),
               int(context.get("t_trip", 0)) // 60 if "t_trip" in context else None,
               min_support)
        if key in self._cache:
            return self._cache[key]
        model = self._fit_uncached(route, origin, dest, condition, context, min_support, sigma_floor)
        self._cache[key] = model
        return model

    def _fit_uncached(self, route, origin, dest, condition, context, min_support, sigma_floor):
        if route not in self._arrive:
            raise InsufficientHistoryError(f"no history for route {route}")
        stops = self.routes[route].stops
        try:
            i, j = stops.index(origin), stops.index(dest)
        except ValueError as exc:
            raise InsufficientHistoryError(f"{origin}->{dest} not on route {route}") from exc
        dep, arr = self._depart[route], self._arrive[route]
        durations = arr[:, j] - dep[:, i]
        mask = np.isfinite(durations) & (durations > 0)
        if condition in ("theta1", "theta3"):
            t_s0 = context["t_s0"]
            window = context.get("start_window_s", 1200)
            tod = dep[:, i] % DAY_S
            diff = np.abs(tod - (t_s0 % DAY_S))
            diff = np.minimum(diff, DAY_S - diff)
            mask &= np.isfinite(tod) & (diff <= window)
        if condition in ("theta2", "theta3"):
            s1 = context["s1"]
            t_trip = context["t_trip"]
            tol = context.get("trip_time_tolerance", 0.1)
            k = stops.index(s1)
            trip_dur = arr[:, k] - dep[:, i]
            mask &= np.isfinite(trip_dur) & (np.abs(trip_dur - t_trip) <= tol * t_trip)
        samples = durations[mask]
        if len(samples) < min_support:
            raise InsufficientHistoryError(
                f"{origin}->{dest} under {condition}: {len(samples)} < {min_support} samples"
            )
        return TravelTimeModel(
            origin, dest, condition,
            mu=float(samples.mean()),
            sigma=max(sigma_floor, float(samples.std(ddof=0))),
            support_count=int(len(samples)),
        )

    def fit_with_fallback(self, route, origin, dest, condition, context=None,
                          min_support=5, sigma_floor=5.0) -> TravelTimeModel:
        last_error = None
        for cond in _FALLBACKS[condition]:
            try:
                return self.fit(route, origin, dest, cond, context, min_support, sigma_floor)
            except InsufficientHistoryError as exc:
                last_error = exc
        raise last_error


def detect_gaps(run: TripRun, route: Route) -> list[GapInterval]:
    """One GapInterval per maximal run of route stops missing from the trip."""
    if not run.events:
        raise UnrepairableTripError(f"trip {run.vehicle}/{run.trip_index} has no events")
    idx = {s: i for i, s in enumerate(route.stops)}
    observed = [(idx[e.stop], e) for e in run.events if e.stop in idx]
    if not observed:
        raise UnrepairableTripError(
            f"trip {run.vehicle}/{run.trip_index} shares no stops with route {route.id}"
        )
    gaps = []
    first_idx = observed[0][0]
    if first_idx > 0:
        gaps.append(GapInterval(run.vehicle, run.route, run.trip_index,
                                None, observed[0][1], route.stops[:first_idx]))
    for (ia, ea), (ib, eb) in zip(observed, observed[1:]):
        if ib - ia > 1:
            gaps.append(GapInterval(run.vehicle, run.route, run.trip_index,
                                    ea, eb, route.stops[ia + 1:ib]))
    last_idx = observed[-1][0]
    if last_idx < len(route.stops) - 1:
        gaps.append(GapInterval(run.vehicle, run.route, run.trip_index,
                                observed[-1][1], None, route.stops[last_idx + 1:]))
    return gaps


def infer_station_from_swipe(
    gap: GapInterval,
    first_swipe_ts: int,
    models: dict[StopId, TravelTimeModel],
) -> StopId:
    """Most probable gap station for the elapsed anchor-to-swipe travel time."""
    if not gap.missing_stops:
        raise ValueError("gap has no candidates")
    if not models:
        raise InsufficientHistoryError("no model")
    elapsed = first_swipe_ts - gap.anchor_before.depart_ts
    best, best_p = None, -1.0
    for stop in gap.missing_stops:   # route order breaks density ties
        model = models.get(stop)
        if model is None:
            continue
        p = model.pdf(elapsed)
        if p > best_p:
            best, best_p = stop, p
    if best is None:
        raise InsufficientHistoryError("no model")
    return best


def infer_travel_time(model: TravelTimeModel) -> float:
    """Most probable travel time: the Gaussian mode, i.e. its mean."""
    return model.mu


def _isotonic_strict(times: list[float], lo: float, hi: float) -> tuple[list[int], bool]:
    """Project times onto a strictly increasing sequence inside (lo, hi).

    Pool-adjacent-violators first, then spread exact ties by one second.
    Returns integer times and whether anything moved.
    """
    n = len(times)
    if n == 0:
        return [], False
    values = [float(t) for t in times]
    weights = [1.0] * n
    blocks = [[v, w, 1] for v, w in zip(values, weights)]  # mean, weight, count
    merged: list[list[float]] = []
    for b in blocks:
        merged.append(b)
        while len(merged) > 1 and merged[-2][0] >= merged[-1][0]:
            last = merged.pop()
            prev = merged.pop()
            w = prev[1] + last[1]
            mean = (prev[0] * prev[1] + last[0] * last[1]) / w
            merged.append([mean, w, prev[2] + last[2]])
    flat: list[float] = []
    for mean, _, count in merged:
        flat.extend([mean] * count)
    # strictly increasing inside the anchors; monotonicity wins over the clamp
    out: list[int] = []
    prev = lo
    for k, v in enumerate(flat):
        v = min(v, hi - (n - k))
        v = max(v, prev + 1)
        out.append(int(round(v)))
        prev = out[-1]
    adjusted = any(abs(a - b) > 0.5 for a, b in zip(out, times))
    return out, adjusted


@dataclass
class RepairResult:
    runs: list[TripRun]
    synthetic_events: list[SyntheticEvent]
    matched_swipes: list[SwipeRecord]
    diagnostics: list[str] = field(default_factory=list)


def repair(
    runs: list[TripRun],
    unmatched_swipes: list[SwipeRecord],
    archive: TravelTimeArchive,
    routes: dict[RouteId, Route],
    condition: str = "theta2",
    min_support: int = 5,
    seg_epsilon_s: int = 40,
) -> RepairResult:
    """Fill gaps in trip runs and match the swipes stranded inside them.

    Gap stations holding swipes take the swipe-inferred identity with the
    representative swipe time as arrival proxy; the rest get the conditioned
    travel-time mode. Inconsistent orderings are isotonically adjusted and
    flagged.
    """
    swipes_by_vehicle: dict[str, list[SwipeRecord]] = defaultdict(list)
    for s in unmatched_swipes:
        swipes_by_vehicle[s.vehicle].append(s)
    for lst in swipes_by_vehicle.values():
        lst.sort(key=lambda s: s.ts)

    out_runs: list[TripRun] = []
    synthetic: list[SyntheticEvent] = []
    matched: list[SwipeRecord] = []
    diagnostics: list[str] = []

    for run in runs:
        route = routes.get(run.route)
        if route is None:
            diagnostics.append(f"{run.vehicle}/{run.trip_index}: unknown route {run.route}")
            out_runs.append(run)
            continue
        try:
            gaps = detect_gaps(run, route)
        except UnrepairableTripError as exc:
            diagnostics.append(str(exc))
            continue
        extra_events: list[SyntheticEvent] = []
        for gap in gaps:
            if not gap.anchored:
                diagnostics.append(
                    f"{run.vehicle}/{run.trip_index}: unanchored gap of {len(gap.missing_stops)} stops"
                )
                continue
            extra_events.extend(_repair_gap(
                gap, swipes_by_vehicle.get(run.vehicle, []), archive, route,
                condition, min_support, seg_epsilon_s, matched, diagnostics,
            ))
        synthetic.extend(extra_events)
        merged = list(run.events) + [
            StopEvent(e.vehicle, e.route, e.stop, e.arrive_ts, e.depart_ts)
            for e in extra_events
        ]
        merged.sort(key=lambda e: e.arrive_ts)
        out_runs.append(TripRun(run.vehicle, run.route, run.trip_index, tuple(merged)))
    return RepairResult(out_runs, synthetic, matched, diagnostics)


def _repair_gap(gap, vehicle_swipes, archive, route, condition, min_support,
                seg_epsilon_s, matched_out, diagnostics) -> list[SyntheticEvent]:
    t_lo = gap.anchor_before.depart_ts
    t_hi = gap.anchor_after.arrive_ts
    context = {
        "t_s0": gap.anchor_before.depart_ts,
        "s1": gap.anchor_after.stop,
        "t_trip": t_hi - gap.anchor_before.depart_ts,
    }
    models: dict[StopId, TravelTimeModel] = {}
    for stop in gap.missing_stops:
        try:
            models[stop] = archive.fit_with_fallback(
                gap.route, gap.anchor_before.stop, stop, condition, context, min_support)
        except InsufficientHistoryError as exc:
            diagnostics.append(f"{gap.vehicle}/{gap.trip_index}@{stop}: {exc}")

    # swipes stranded strictly between the anchors
    inside = [s for s in vehicle_swipes if t_lo < s.ts < t_hi]
    swipe_arrivals: dict[StopId, int] = {}
    for group in segment_swipes(inside, seg_epsilon_s):
        rep = group[0]
        try:
            stop = infer_station_from_swipe(gap, rep.ts, models)
        except (InsufficientHistoryError, ValueError) as exc:
            diagnostics.append(f"{gap.vehicle}/{gap.trip_index}: swipe group unmatched ({exc})")
            continue
        swipe_arrivals.setdefault(stop, rep.ts)
        for s in group:
            matched_out.append(SwipeRecord(s.card, s.ts, s.vehicle, s.route, stop))

    times: list[float] = []
    methods: list[str] = []
    usable: list[StopId] = []
    for stop in gap.missing_stops:
        if stop in swipe_arrivals:
            times.append(float(swipe_arrivals[stop]))
            methods.append("swipe")
            usable.append(stop)
        elif stop in models:
            times.append(t_lo + infer_travel_time(models[stop]))
            methods.append("travel_time")
            usable.append(stop)
        else:
            diagnostics.append(f"{gap.vehicle}/{gap.trip_index}@{stop}: left missing")
    fixed, moved = _isotonic_strict(times, t_lo, t_hi)
    dwell = int(round(archive.median_dwell))
    events = []
    for stop, t, method in zip(usable, fixed, methods):
        events.append(SyntheticEvent(
            gap.vehicle, gap.route, gap.trip_index, stop,
            int(t), int(t) + dwell, method, adjusted=moved,
        ))
    if moved:
        diagnostics.append(f"{gap.vehicle}/{gap.trip_index}: isotonic adjustment applied")
    return events
