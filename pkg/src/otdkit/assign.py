"""Ridership redistribution when a new route enters a corridor.

Two assignment engines share one plan enumeration: a generalized-time softmax
baseline (ride + transfer walk + wait collapsed to one scalar) and the
preference engine that recomputes each affected passenger's scenario vector
and dispatches to their personal model, the macro model, or the baseline, in
that order. Assignment is expected-value (fractional passengers) so results
are deterministic; a seeded sampling mode exists for distribution tests.
"""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np

from .choice import (
    ChoiceNetwork, FEATURE_NAMES, Plan, PlanLeg, PreferenceModel,
    enumerate_alternatives, normalize_features, plan_probabilities, scenario_vector,
)
from .model import Route, RouteId, StopId, distance

WALK_SPEED_MPS = 1.2


def generalized_time(net: ChoiceNetwork, legs: list[PlanLeg]) -> float:
    """Ride + transfer walk + wait, seconds, with the fixed estimation constants
    (20/30 km/h by speed class, 30 s per intermediate stop, wait = headway/2)."""
    total = 0.0
    for k, leg in enumerate(legs):
        route = net.routes[leg.route]
        i, j = route.index_of(leg.board), route.index_of(leg.alight)
        total += net.leg_ride_time_s(leg.route, i, j)
        total += route.headway_min * 60.0 / 2.0
        if k > 0:
            total += net.dist(legs[k - 1].alight, leg.board) / WALK_SPEED_MPS
    return total


def utility_assign(times: list[float]) -> np.ndarray:
    """Softmax over negated min-max-normalized generalized times."""
    if not times:
        raise ValueError("no plans")
    arr = np.asarray(times, dtype=float)
    lo, hi = arr.min(), arr.max()
    norm = (arr - lo) / (hi - lo) if hi > lo else np.zeros_like(arr)
    ex = np.exp(-norm)
    return ex / ex.sum()


def affected(net: ChoiceNetwork, origin: StopId, dest: StopId, new_route: Route,
             eps_m: float = 350.0) -> bool:
    """Whether a new route competes for an OD: some same-direction stop pair
    within a combined walk of 2 * eps."""
    stops = new_route.stops
    for i, m in enumerate(stops):
        dm = distance(net.stops[origin].position, net.stops[m].position)
        if dm > 2 * eps_m:
            continue
        for n in stops[i + 1:]:
            if dm + distance(net.stops[dest].position, net.stops[n].position) <= 2 * eps_m:
                return True
    return False


@dataclass
class ModelStore:
    personal: dict[str, dict[tuple[int, ...], PreferenceModel]] = field(default_factory=dict)
    macro: dict[tuple[int, ...], PreferenceModel] = field(default_factory=dict)

    @classmethod
    def from_models(cls, models: list[PreferenceModel]) -> "ModelStore":
        store = cls()
        for m in models:
            if m.owner == "macro":
                store.macro[m.eta] = m
            else:
                store.personal.setdefault(m.owner, {})[m.eta] = m
        return store

    def lookup(self, card: str, eta: tuple[int, ...]) -> tuple[PreferenceModel | None, str]:
        model = self.personal.get(card, {}).get(eta)
        if model is not None:
            return model, "personal"
        model = self.macro.get(eta)
        if model is not None:
            return model, "macro"
        return None, "fallback"


def preference_assign(
    net: ChoiceNetwork,
    card: str,
    plans: list[Plan],
    store: ModelStore,
) -> tuple[np.ndarray, str]:
    """Plan probabilities for one passenger under the new alternative set.

    Recomputes the scenario vector over the offered plans, then personal
    model -> macro model -> generalized-time baseline.
    """
    matrix = np.array([p.features for p in plans])
    eta = scenario_vector(matrix)
    model, source = store.lookup(card, eta)
    if model is None or sum(eta) == 0:
        times = [generalized_time(net, list(p.legs)) for p in plans]
        return utility_assign(times), "fallback"
    normalized = normalize_features(matrix, eta)
    return plan_probabilities(normalized, eta, model.weight_vector(), model.intercept), source


@dataclass(frozen=True)
class ODCell:
    route: RouteId
    board: StopId
    alight: StopId


@dataclass
class RedistributionResult:
    new_route_matrix: dict[tuple[StopId, StopId], float]
    route_matrices: dict[RouteId, dict[tuple[StopId, StopId], float]]
    total_before: float
    total_after: float
    method_counts: Counter
    affected_cells: int


def redistribute(
    net: ChoiceNetwork,
    cells: dict[ODCell, list[tuple[str, float]]],
    new_route: Route | None,
    store: ModelStore,
    access_eps_m: float = 350.0,
    rng: np.random.Generator | None = None,
) -> RedistributionResult:
    """Expected ridership matrices after a new route enters.

    ``cells`` maps each existing per-route OD cell to its (card, count)
    riders. Unaffected cells pass through; affected riders re-choose over the
    full plan set including the new route. With ``rng`` set, passengers are
    sampled to single plans instead of fractionally split.
    """
    new_matrix: dict[tuple[StopId, StopId], float] = defaultdict(float)
    old: dict[RouteId, dict[tuple[StopId, StopId], float]] = defaultdict(lambda: defaultdict(float))
    methods: Counter = Counter()
    total_before = total_after = 0.0
    n_affected = 0
    extra = {new_route.id: new_route} if new_route is not None else None
    plan_cache: dict[tuple[StopId, StopId], list[Plan]] = {}

    for cell in sorted(cells, key=lambda c: (c.route, c.board, c.alight)):
        riders = cells[cell]
        cell_total = sum(w for _, w in riders)
        total_before += cell_total
        if new_route is None or not affected(net, cell.board, cell.alight, new_route, access_eps_m):
            old[cell.route][(cell.board, cell.alight)] += cell_total
            total_after += cell_total
            continue
        n_affected += 1
        key = (cell.board, cell.alight)
        if key not in plan_cache:
            plan_cache[key] = enumerate_alternatives(
                net, cell.board, cell.alight,
                access_eps_m=access_eps_m, extra_routes=extra)
        plans = plan_cache[key]
        if not plans:
            old[cell.route][key] += cell_total
            total_after += cell_total
            continue
        for card, weight in riders:
            probs, source = preference_assign(net, card, plans, store)
            methods[source] += 1
            if rng is not None:
                chosen = int(rng.choice(len(plans), p=probs))
                alloc = np.zeros(len(plans))
                alloc[chosen] = weight
            else:
                alloc = probs * weight
            for p, share in zip(plans, alloc):
                if share == 0.0:
                    continue
                total_after += share
                for leg in p.legs:
                    if new_route is not None and leg.route == new_route.id:
                        new_matrix[(leg.board, leg.alight)] += share
                    else:
                        old[leg.route][(leg.board, leg.alight)] += share
    return RedistributionResult(
        dict(new_matrix), {r: dict(m) for r, m in old.items()},
        total_before, total_after, methods, n_affected,
    )
