"""Route-choice factor extraction and multinomial-logit preference fitting.

Every travel stage (an origin-destination demand) is expanded into the full
set of plans reachable within the access-walk radius, each described by eight
factors: transfers, stops passed, ride distance, travel time, stop density,
cumulative wait, transfer walk and access walk. A binary scenario vector marks
which factors actually differ across the stage's alternatives; only those
enter the utility. Weights are fitted per passenger by projected gradient
ascent on the log-likelihood under non-negativity, kept when the McFadden
pseudo-R2 clears the configured floor, and aggregated (ridership-weighted)
into per-scenario passenger and macro models.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import Route, RouteId, Stop, StopId, distance

FEATURE_NAMES = (
    "transfers", "stops_passed", "ride_distance_km", "travel_time_s",
    "stop_per_km", "cum_wait_s", "transfer_walk_m", "access_walk_m",
)
N_FEATURES = len(FEATURE_NAMES)


@dataclass(frozen=True)
class PlanLeg:
    route: RouteId
    board: StopId
    alight: StopId


@dataclass(frozen=True)
class Plan:
    legs: tuple[PlanLeg, ...]
    features: tuple[float, ...]   # aligned with FEATURE_NAMES

    @property
    def key(self) -> tuple:
        return self.legs


@dataclass(frozen=True)
class PreferenceModel:
    owner: str                      # card id or "macro"
    eta: tuple[int, ...]
    weights: tuple[float | None, ...]   # None where the scenario masks the factor
    intercept: float
    r2: float
    support: int                    # ridership behind the fit

    def weight_vector(self) -> np.ndarray:
        return np.array([w if w is not None else 0.0 for w in self.weights])

    def to_dict(self) -> dict:
        return {
            "owner": self.owner,
            "eta": "".join(map(str, self.eta)),
            "weights": [w for w in self.weights],
            "intercept": self.intercept,
            "r2": self.r2,
            "support": self.support,
        }


class ChoiceNetwork:
    """Route/stop lookups shared by plan enumeration and assignment."""

    def __init__(self, stops: dict[StopId, Stop], routes: dict[RouteId, Route],
                 speed_regular_kmh: float = 20.0, speed_express_kmh: float = 30.0,
                 board_dwell_s: float = 30.0):
        self.stops = stops
        self.routes = routes
        self.speed = {"regular": speed_regular_kmh / 3.6, "express": speed_express_kmh / 3.6}
        self.board_dwell_s = board_dwell_s
        self.serving: dict[StopId, list[tuple[RouteId, int]]] = defaultdict(list)
        for rid in sorted(routes):
            for i, s in enumerate(routes[rid].stops):
                self.serving[s].append((rid, i))
        self._cumdist: dict[RouteId, np.ndarray] = {}
        for rid in sorted(routes):
            seq = routes[rid].stops
            acc = [0.0]
            for a, b in zip(seq, seq[1:]):
                acc.append(acc[-1] + distance(stops[a].position, stops[b].position))
            self._cumdist[rid] = np.array(acc)
        self._near_cache: dict[tuple[StopId, float], tuple[StopId, ...]] = {}

    def leg_distance_m(self, route: RouteId, i: int, j: int) -> float:
        cd = self._cumdist[route]
        return float(cd[j] - cd[i])

    def near(self, stop: StopId, radius_m: float) -> tuple[StopId, ...]:
        key = (stop, radius_m)
        if key not in self._near_cache:
            p = self.stops[stop].position
            self._near_cache[key] = tuple(
                s for s in sorted(self.stops)
                if distance(p, self.stops[s].position) <= radius_m
            )
        return self._near_cache[key]

    def dist(self, a: StopId, b: StopId) -> float:
        return distance(self.stops[a].position, self.stops[b].position)

    def leg_ride_time_s(self, route: RouteId, i: int, j: int) -> float:
        r = self.routes[route]
        ride = self.leg_distance_m(route, i, j) / self.speed[r.speed_class]
        return ride + self.board_dwell_s * (j - i - 1)


def plan_features(
    net: ChoiceNetwork,
    legs: Sequence[PlanLeg],
    observed_origin: StopId,
    observed_dest: StopId,
    home: StopId | None = None,
    work: StopId | None = None,
    access_eps_m: float = 350.0,
    travel_time_override: float | None = None,
) -> tuple[float, ...]:
    """Eight route-choice factors for one plan serving an observed OD."""
    transfers = len(legs) - 1
    stops_passed = 0
    ride_m = 0.0
    ride_time = 0.0
    cum_wait = 0.0
    transfer_walk = 0.0
    for k, leg in enumerate(legs):
        route = net.routes[leg.route]
        i, j = route.index_of(leg.board), route.index_of(leg.alight)
        stops_passed += j - i - 1
        ride_m += net.leg_distance_m(leg.route, i, j)
        ride_time += net.leg_ride_time_s(leg.route, i, j)
        cum_wait += route.headway_min * 60.0 / 2.0
        if k > 0:
            transfer_walk += net.dist(legs[k - 1].alight, leg.board)
    ride_km = ride_m / 1000.0
    travel_time = travel_time_override if travel_time_override is not None else ride_time

    def reference(observed: StopId) -> StopId:
        if home is not None and net.dist(observed, home) < access_eps_m:
            return home
        if work is not None and net.dist(observed, work) < access_eps_m:
            return work
        return observed

    access = (net.dist(reference(observed_origin), legs[0].board)
              + net.dist(reference(observed_dest), legs[-1].alight))
    return (
        float(transfers),
        float(stops_passed),
        ride_km,
        travel_time,
        stops_passed / ride_km if ride_km > 0 else 0.0,
        cum_wait,
        transfer_walk,
        access,
    )


def enumerate_alternatives(
    net: ChoiceNetwork,
    origin: StopId,
    dest: StopId,
    home: StopId | None = None,
    work: StopId | None = None,
    access_eps_m: float = 350.0,
    transfer_radius_m: float = 500.0,
    max_transfers: int = 1,
    extra_routes: dict[RouteId, Route] | None = None,
) -> list[Plan]:
    """All plans whose endpoints stay within the access radius of the observed
    OD, endpoints at least the radius apart, never-used plans included.

    Single-transfer plans are enumerated only for endpoint pairs with no
    direct service (the minimal-walk transfer pair per route pair).
    """
    if extra_routes:
        merged = dict(net.routes)
        merged.update(extra_routes)
        net = ChoiceNetwork(net.stops, merged,
                            net.speed["regular"] * 3.6, net.speed["express"] * 3.6,
                            net.board_dwell_s)
    o_cands = net.near(origin, access_eps_m)
    d_cands = net.near(dest, access_eps_m)
    plans: dict[tuple, Plan] = {}
    for o in o_cands:
        for d in d_cands:
            if net.dist(o, d) < access_eps_m:
                continue
            direct = []
            for rid, i in net.serving.get(o, ()):
                j = net.routes[rid].index_of(d)
                if j > i:
                    direct.append(PlanLeg(rid, o, d))
            for leg in direct:
                key = (leg,)
                if key not in plans:
                    feats = plan_features(net, [leg], origin, dest, home, work, access_eps_m)
                    plans[key] = Plan((leg,), feats)
            if direct or max_transfers < 1:
                continue
            for rid1, i1 in net.serving.get(o, ()):
                for rid2, _ in net.serving.get(d, ()):
                    best = None
                    j2 = net.routes[rid2].index_of(d)
                    for k1 in range(i1 + 1, len(net.routes[rid1].stops)):
                        s1 = net.routes[rid1].stops[k1]
                        for k2 in range(j2):
                            s2 = net.routes[rid2].stops[k2]
                            walk = net.dist(s1, s2)
                            if walk > transfer_radius_m:
                                continue
                            legs = (PlanLeg(rid1, o, s1), PlanLeg(rid2, s2, d))
                            est = (net.leg_ride_time_s(rid1, i1, k1)
                                   + net.leg_ride_time_s(rid2, k2, j2)
                                   + walk / 1.2)
                            if best is None or est < best[0]:
                                best = (est, legs)
                    if best is not None:
                        key = best[1]
                        if key not in plans:
                            feats = plan_features(net, best[1], origin, dest,
                                                  home, work, access_eps_m)
                            plans[key] = Plan(best[1], feats)
    return [plans[k] for k in sorted(plans, key=lambda legs: tuple((l.route, l.board, l.alight) for l in legs))]


# ---------------------------------------------------------------------------
# scenario vectors and normalization
# ---------------------------------------------------------------------------

def scenario_vector(feature_matrix: np.ndarray, decimals: int = 9) -> tuple[int, ...]:
    """Flag = 1 for every factor column taking more than one distinct value."""
    if feature_matrix.ndim != 2 or feature_matrix.shape[1] != N_FEATURES:
        raise ValueError("feature matrix must be n_alternatives x 8")
    if feature_matrix.shape[0] < 2:
        return (0,) * N_FEATURES
    rounded = np.round(feature_matrix, decimals)
    return tuple(int(len(np.unique(rounded[:, m])) > 1) for m in range(N_FEATURES))


def normalize_features(feature_matrix: np.ndarray,
                       eta: tuple[int, ...] | None = None) -> np.ndarray:
    """Column-wise min-max scaling to [0, 1]; constant columns pass through."""
    eta = eta or scenario_vector(feature_matrix)
    out = feature_matrix.astype(float).copy()
    for m, flag in enumerate(eta):
        if not flag:
            continue
        col = out[:, m]
        lo, hi = col.min(), col.max()
        if hi > lo:
            out[:, m] = (col - lo) / (hi - lo)
    return out


# ---------------------------------------------------------------------------
# multinomial logit fitting
# ---------------------------------------------------------------------------

@dataclass
class ChoiceStage:
    """One OD demand: normalized alternatives plus observed pick counts."""
    features: np.ndarray          # n_alt x 8, normalized
    counts: np.ndarray            # n_alt, observed choices per alternative
    eta: tuple[int, ...]


def plan_probabilities(features: np.ndarray, eta: tuple[int, ...],
                       weights: np.ndarray, intercept: float = 0.0) -> np.ndarray:
    """Softmax of the linear utility b - sum(w * theta * eta) per alternative."""
    mask = np.asarray(eta, dtype=float)
    utilities = intercept - features @ (weights * mask)
    utilities -= utilities.max()
    ex = np.exp(utilities)
    return ex / ex.sum()


def _log_likelihood(weights: np.ndarray, stages: list[ChoiceStage]) -> float:
    total = 0.0
    for stage in stages:
        p = plan_probabilities(stage.features, stage.eta, weights)
        total += float(stage.counts @ np.log(np.maximum(p, 1e-300)))
    return total


def _gradient(weights: np.ndarray, stages: list[ChoiceStage]) -> np.ndarray:
    grad = np.zeros(N_FEATURES)
    for stage in stages:
        p = plan_probabilities(stage.features, stage.eta, weights)
        n = stage.counts.sum()
        grad += (n * p - stage.counts) @ stage.features
    return grad * np.array(stages[0].eta, dtype=float)


def fit_mnl(
    stages: list[ChoiceStage],
    max_iter: int = 2000,
    tol: float = 1e-8,
    min_r2: float = 0.5,
    owner: str = "anonymous",
) -> tuple[PreferenceModel | None, str]:
    """Maximum-likelihood non-negative weights by projected gradient ascent.

    Returns (model, diagnostic); the model is None when the fit fails to
    converge or the McFadden pseudo-R2 stays under ``min_r2``.
    """
    if not stages:
        return None, "no stages"
    eta = stages[0].eta
    if any(s.eta != eta for s in stages):
        raise ValueError("stages must share one scenario vector")
    if sum(eta) == 0:
        return None, "scenario offers no varying factor"
    w = np.zeros(N_FEATURES)
    ll = _log_likelihood(w, stages)
    ll_null = ll  # W = 0 gives the equal-probability baseline
    step = 0.5
    converged = False
    for _ in range(max_iter):
        grad = _gradient(w, stages)
        improved = False
        while step > 1e-12:
            cand = np.maximum(0.0, w + step * grad)
            cand_ll = _log_likelihood(cand, stages)
            if cand_ll > ll:
                improved = True
                break
            step *= 0.5
        if not improved:
            converged = True
            break
        if cand_ll - ll < tol * (abs(ll) + 1.0):
            w, ll = cand, cand_ll
            converged = True
            break
        w, ll = cand, cand_ll
        step = min(step * 1.2, 8.0)
    if not converged:
        return None, "no convergence"
    if ll_null >= -1e-12:
        return None, "degenerate stages (single alternative)"
    r2 = 1.0 - ll / ll_null
    weights = tuple(float(w[m]) if eta[m] else None for m in range(N_FEATURES))
    support = int(sum(s.counts.sum() for s in stages))
    model = PreferenceModel(owner, eta, weights, 0.0, float(r2), support)
    if r2 < min_r2:
        return None, f"r2 {r2:.3f} below threshold"
    return model, "ok"


def aggregate_models(models: list[PreferenceModel], owner: str) -> list[PreferenceModel]:
    """Ridership-weighted mean of weights within identical scenario vectors."""
    by_eta: dict[tuple[int, ...], list[PreferenceModel]] = defaultdict(list)
    for m in models:
        by_eta[m.eta].append(m)
    out = []
    for eta in sorted(by_eta):
        group = by_eta[eta]
        total = sum(m.support for m in group)
        if total == 0:
            continue
        acc = np.zeros(N_FEATURES)
        r2 = 0.0
        for m in group:
            acc += m.weight_vector() * m.support
            r2 += m.r2 * m.support
        acc /= total
        weights = tuple(float(acc[k]) if eta[k] else None for k in range(N_FEATURES))
        out.append(PreferenceModel(owner, eta, weights, 0.0, r2 / total, total))
    return out


def dominant_factor(model: PreferenceModel, margin: float = 0.2) -> str | None:
    """Factor whose weight exceeds the runner-up by the margin, else None."""
    active = [(w, FEATURE_NAMES[k]) for k, w in enumerate(model.weights) if w is not None]
    if not active:
        return None
    ordered = sorted(active, reverse=True)
    if len(ordered) == 1:
        return ordered[0][1]
    top, runner = ordered[0][0], ordered[1][0]
    if top > runner + margin * abs(runner):
        return ordered[0][1]
    return None


# ---------------------------------------------------------------------------
# passenger-level pipeline
# ---------------------------------------------------------------------------

@dataclass
class StageGroup:
    """Observed journeys aggregated per OD demand with their plan set."""
    origin: StopId
    dest: StopId
    plans: list[Plan]
    counts: np.ndarray
    eta: tuple[int, ...]
    features_normalized: np.ndarray


def build_stage_groups(
    net: ChoiceNetwork,
    journey_legs: list[tuple[tuple[PlanLeg, ...], StopId, StopId]],
    home: StopId | None,
    work: StopId | None,
    access_eps_m: float = 350.0,
    observed_times: dict[tuple, float] | None = None,
) -> list[StageGroup]:
    """Group one passenger's journeys by OD and attach the alternative sets.

    ``journey_legs`` holds (legs, origin, dest) per observed journey. Observed
    mean travel times (keyed by leg tuple) override the estimated feature.
    """
    by_od: dict[tuple[StopId, StopId], list[tuple[PlanLeg, ...]]] = defaultdict(list)
    for legs, o, d in journey_legs:
        by_od[(o, d)].append(legs)
    groups = []
    for (o, d) in sorted(by_od):
        used = by_od[(o, d)]
        plans = enumerate_alternatives(net, o, d, home, work, access_eps_m)
        index = {p.key: k for k, p in enumerate(plans)}
        for legs in used:
            if legs not in index:
                feats = plan_features(net, legs, o, d, home, work, access_eps_m)
                index[legs] = len(plans)
                plans.append(Plan(legs, feats))
        if observed_times:
            refreshed = []
            for p in plans:
                t = observed_times.get(p.key)
                if t is not None:
                    feats = list(p.features)
                    feats[FEATURE_NAMES.index("travel_time_s")] = t
                    refreshed.append(Plan(p.legs, tuple(feats)))
                else:
                    refreshed.append(p)
            plans = refreshed
        counts = np.zeros(len(plans))
        for legs in used:
            counts[index[legs]] += 1
        matrix = np.array([p.features for p in plans])
        eta = scenario_vector(matrix)
        groups.append(StageGroup(o, d, plans, counts, eta, normalize_features(matrix, eta)))
    return groups


def fit_passenger(
    card: str,
    groups: list[StageGroup],
    min_r2: float = 0.5,
    max_iter: int = 2000,
    tol: float = 1e-8,
) -> tuple[list[PreferenceModel], list[str]]:
    """Fit one model per scenario vector over a passenger's stage groups."""
    by_eta: dict[tuple[int, ...], list[ChoiceStage]] = defaultdict(list)
    for g in groups:
        if len(g.plans) < 2 or sum(g.eta) == 0:
            continue
        by_eta[g.eta].append(ChoiceStage(g.features_normalized, g.counts, g.eta))
    models, notes = [], []
    for eta in sorted(by_eta):
        model, note = fit_mnl(by_eta[eta], max_iter, tol, min_r2, owner=card)
        notes.append(f"{card} eta={''.join(map(str, eta))}: {note}")
        if model is not None:
            models.append(model)
    return models, notes
