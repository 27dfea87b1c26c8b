"""Closed trip-chain mining over multi-day O-T-D fragments.

A passenger's journeys are first clustered by OD similarity (walk-distance of
switching between them, infinite when directions oppose). Clusters become
vertices of a directed graph whose edges encode spatio-temporal linkability;
budgeted depth-first search extracts spatially closed loops, each emission
consuming one usage unit per involved vertex. Whole journeys as vertices keep
station-level phantom loops out of the result.

Downstream analytics: open-trajectory association (greedy set cover),
record completeness, home/work identification from stop activity vectors,
behavior-distribution clustering (PCA + density scan), region connectivity
(k-means), and corridor extraction.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.vq import kmeans2

from .model import Stop, StopId, bearing_angle, distance

DAY_S = 86400


@dataclass(frozen=True)
class TripRecord:
    """One complete journey (origin to destination), the chain-space atom."""
    card: str
    day: int
    origin: StopId
    dest: StopId
    board_ts: int
    alight_ts: int
    segments: tuple[tuple[StopId, StopId], ...] = ()


@dataclass
class TripCluster:
    cluster_id: int
    origin: StopId
    dest: StopId
    member_idx: tuple[int, ...]

    @property
    def frequency(self) -> int:
        return len(self.member_idx)


@dataclass
class HyperTripGraph:
    clusters: list[TripCluster]
    edges: dict[int, tuple[int, ...]]
    usage: dict[int, int]


@dataclass(frozen=True)
class ClosedChain:
    vertices: tuple[int, ...]
    usage: int
    closure_m: float
    diameter_m: float


@dataclass
class MiningParams:
    cluster_radius_m: float = 700.0
    link_radius_m: float = 700.0
    closure_m: float = 500.0
    prune_fraction: float = 0.03
    overlay_days: int = 2


def trip_similarity(a: TripRecord, b: TripRecord, stops: dict[StopId, Stop]) -> float:
    """Walk distance to switch between two journeys; infinity when they point
    more than 90 degrees apart or either collapses to a point."""
    try:
        angle = bearing_angle(
            (stops[a.origin].position, stops[a.dest].position),
            (stops[b.origin].position, stops[b.dest].position),
        )
    except ValueError:
        return math.inf
    if angle > 90.0:
        return math.inf
    return (distance(stops[a.origin].position, stops[b.origin].position)
            + distance(stops[a.dest].position, stops[b.dest].position))


def cluster_trips(records: list[TripRecord], stops: dict[StopId, Stop],
                  params: MiningParams | None = None) -> list[TripCluster]:
    """Greedy frequency-descending OD clustering with small-cluster pruning."""
    params = params or MiningParams()
    if not records:
        return []
    od_groups: dict[tuple[StopId, StopId], list[int]] = defaultdict(list)
    for i, r in enumerate(records):
        od_groups[(r.origin, r.dest)].append(i)
    pool = sorted(od_groups, key=lambda od: (-len(od_groups[od]), od))
    assigned: set[tuple[StopId, StopId]] = set()
    clusters: list[TripCluster] = []
    for seed in pool:
        if seed in assigned:
            continue
        seed_rec = records[od_groups[seed][0]]
        members = list(od_groups[seed])
        assigned.add(seed)
        for other in pool:
            if other in assigned:
                continue
            if trip_similarity(seed_rec, records[od_groups[other][0]], stops) \
                    <= params.cluster_radius_m:
                members.extend(od_groups[other])
                assigned.add(other)
        clusters.append(TripCluster(len(clusters), seed[0], seed[1], tuple(sorted(members))))
    floor = math.ceil(params.prune_fraction * len(records))
    kept = [c for c in clusters if c.frequency >= max(1, floor)]
    return [TripCluster(i, c.origin, c.dest, c.member_idx) for i, c in enumerate(kept)]


def build_htg(records: list[TripRecord], clusters: list[TripCluster],
              stops: dict[StopId, Stop], params: MiningParams | None = None) -> HyperTripGraph:
    """Directed linkability graph over clusters.

    Edge u->v requires the walk between u's destination and v's origin to stay
    within the link radius AND at least one observation of u preceding v,
    either inside one day or across an overlay of at most ``overlay_days``.
    """
    params = params or MiningParams()
    record_cluster = {}
    for c in clusters:
        for i in c.member_idx:
            record_cluster[i] = c.cluster_id
    by_day: dict[int, list[tuple[int, int]]] = defaultdict(list)  # day -> [(ts, cluster)]
    for i, r in enumerate(records):
        if i in record_cluster:
            by_day[r.day].append((r.board_ts, record_cluster[i]))
    for lst in by_day.values():
        lst.sort()

    precedence: set[tuple[int, int]] = set()
    days = sorted(by_day)
    for day in days:
        seq = by_day[day]
        for i in range(len(seq)):
            for j in range(i + 1, len(seq)):
                if seq[i][1] != seq[j][1]:
                    precedence.add((seq[i][1], seq[j][1]))
    for da in days:
        for db in days:
            if 1 <= db - da <= params.overlay_days:
                for _, cu in by_day[da]:
                    for _, cv in by_day[db]:
                        if cu != cv:
                            precedence.add((cu, cv))

    edges: dict[int, list[int]] = {c.cluster_id: [] for c in clusters}
    for u in clusters:
        for v in clusters:
            if u.cluster_id == v.cluster_id:
                continue
            if (u.cluster_id, v.cluster_id) not in precedence:
                continue
            if distance(stops[u.dest].position, stops[v.origin].position) \
                    < params.link_radius_m:
                edges[u.cluster_id].append(v.cluster_id)
    return HyperTripGraph(
        clusters,
        {k: tuple(sorted(v)) for k, v in edges.items()},
        {c.cluster_id: c.frequency for c in clusters},
    )


def _canonical_cycle(chain: list[int]) -> tuple[int, ...]:
    k = chain.index(min(chain))
    return tuple(chain[k:] + chain[:k])


def _find_one_chain(start, htg, budget, stops, closure_m):
    origins = {c.cluster_id: stops[c.origin].position for c in htg.clusters}
    dests = {c.cluster_id: stops[c.dest].position for c in htg.clusters}
    path = [start]
    on_path = {start}
    iters = [iter(htg.edges.get(start, ()))]
    while iters:
        nxt = next(iters[-1], None)
        if nxt is None:
            iters.pop()
            on_path.discard(path.pop())
            continue
        if budget.get(nxt, 0) <= 0 or nxt in on_path:
            continue
        for i, u in enumerate(path):  # earliest prefix wins: longest chain
            if distance(origins[u], dests[nxt]) <= closure_m:
                return path[i:] + [nxt]
        path.append(nxt)
        on_path.add(nxt)
        iters.append(iter(htg.edges.get(nxt, ())))
    return None


def find_closed_chains(htg: HyperTripGraph, stops: dict[StopId, Stop],
                       params: MiningParams | None = None) -> list[ClosedChain]:
    """Budgeted DFS extraction of spatially closed loops.

    Each emission decrements every involved vertex's remaining budget (its
    observed frequency); exhausted vertices drop out. Start vertices are
    scanned in id order after every emission, so results are deterministic.
    """
    params = params or MiningParams()
    budget = dict(htg.usage)
    counts: Counter = Counter()
    emitting = True
    guard = sum(budget.values()) + 1
    while emitting and guard > 0:
        emitting = False
        for start in sorted(budget):
            if budget[start] <= 0:
                continue
            chain = _find_one_chain(start, htg, budget, stops, params.closure_m)
            if chain is not None:
                for v in chain:
                    budget[v] -= 1
                counts[_canonical_cycle(chain)] += 1
                emitting = True
                guard -= 1
                break
    by_id = {c.cluster_id: c for c in htg.clusters}
    out = []
    for key in sorted(counts):
        members = [by_id[v] for v in key]
        points = [stops[c.origin].position for c in members] + \
                 [stops[c.dest].position for c in members]
        diameter = max(distance(p, q) for p in points for q in points)
        closure = distance(stops[members[0].origin].position,
                           stops[members[-1].dest].position)
        out.append(ClosedChain(key, counts[key], closure, diameter))
    return out


@dataclass
class PassengerChains:
    card: str
    records: list[TripRecord]
    clusters: list[TripCluster]
    htg: HyperTripGraph
    chains: list[ClosedChain]

    def record_cluster_map(self) -> dict[int, int]:
        return {i: c.cluster_id for c in self.clusters for i in c.member_idx}


def mine_chains(card: str, records: list[TripRecord], stops: dict[StopId, Stop],
                params: MiningParams | None = None) -> PassengerChains:
    params = params or MiningParams()
    clusters = cluster_trips(records, stops, params)
    htg = build_htg(records, clusters, stops, params)
    chains = find_closed_chains(htg, stops, params)
    return PassengerChains(card, records, clusters, htg, chains)


# ---------------------------------------------------------------------------
# association and metrics
# ---------------------------------------------------------------------------

def associate_open_trips(
    chains: list[ClosedChain],
    day_record_clusters: list[tuple[int, int]],   # (record_idx, cluster_id)
) -> tuple[dict[tuple[int, ...], list[int]], list[int]]:
    """Greedy set cover of one day's records by mined chains.

    Picks the chain maximizing support x coverage, claims its equivalent
    records, repeats. A record is never claimed twice.
    """
    remaining = dict(day_record_clusters)
    mapping: dict[tuple[int, ...], list[int]] = {}
    total = len(day_record_clusters)
    if total == 0:
        return {}, []
    while remaining:
        best = None
        for chain in chains:
            vset = set(chain.vertices)
            hits = [i for i, c in remaining.items() if c in vset]
            if not hits:
                continue
            support = len(hits) / len(chain.vertices)
            coverage = len(hits) / len(remaining)
            score = support * coverage
            if best is None or score > best[0]:
                best = (score, chain, hits)
        if best is None:
            break
        _, chain, hits = best
        mapping.setdefault(chain.vertices, []).extend(sorted(hits))
        for i in hits:
            del remaining[i]
    return mapping, sorted(remaining)


def completeness(chains: list[ClosedChain], n_total_records: int) -> float:
    """Share of a passenger's records accounted for by chain traversals."""
    if n_total_records <= 0:
        raise ValueError("no trips recorded")
    covered = sum(c.usage * len(c.vertices) for c in chains)
    return min(1.0, covered / n_total_records)


def chain_diameter(chain: ClosedChain) -> float:
    return chain.diameter_m


# ---------------------------------------------------------------------------
# home / work identification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StopActivityVector:
    stop: StopId
    earliest_prob: float      # chance of being the day's first visited stop
    day_dwell_h: float        # cumulative dwell inside 08-19
    night_dwell_h: float      # cumulative dwell inside 17-07


def _window_overlap_hours(t0: int, t1: int, start_h: int, end_h: int) -> float:
    """Overlap of [t0, t1) with a daily (possibly wrapping) hour window."""
    if t1 <= t0:
        return 0.0
    t1 = min(t1, t0 + 2 * DAY_S)   # dwell attribution caps at two days
    total = 0.0
    day = t0 // DAY_S
    while day * DAY_S < t1:
        base = day * DAY_S
        if start_h < end_h:
            spans = [(base + start_h * 3600, base + end_h * 3600)]
        else:
            spans = [(base + start_h * 3600, base + DAY_S),
                     (base, base + end_h * 3600)]
        for lo, hi in spans:
            total += max(0, min(hi, t1) - max(lo, t0))
        day += 1
    return total / 3600.0


def build_activity_vectors(
    records: list[TripRecord],
    day_window: tuple[int, int] = (8, 19),
    night_window: tuple[int, int] = (17, 7),
) -> list[StopActivityVector]:
    """Per-stop activity statistics from one passenger's journey records.

    Dwell at a destination runs from arrival to the next boarding anywhere
    (overnight included); the origin of each day's first record collects the
    pre-travel dwell from the previous day's end.
    """
    if not records:
        return []
    ordered = sorted(records, key=lambda r: r.board_ts)
    first_by_day: Counter = Counter()
    days = set()
    for r in ordered:
        days.add(r.day)
    for day in sorted(days):
        day_re = [r for r in ordered if r.day == day]
        first_by_day[day_re[0].origin] += 1
    day_dwell: Counter = Counter()
    night_dwell: Counter = Counter()
    for cur, nxt in zip(ordered, ordered[1:]):
        day_dwell[cur.dest] += _window_overlap_hours(cur.alight_ts, nxt.board_ts, *day_window)
        night_dwell[cur.dest] += _window_overlap_hours(cur.alight_ts, nxt.board_ts, *night_window)
    # final destination dwells until the end of the following night window
    last = ordered[-1]
    end = (last.alight_ts // DAY_S + 1) * DAY_S + night_window[1] * 3600
    day_dwell[last.dest] += _window_overlap_hours(last.alight_ts, end, *day_window)
    night_dwell[last.dest] += _window_overlap_hours(last.alight_ts, end, *night_window)

    stops_seen = sorted({r.origin for r in ordered} | {r.dest for r in ordered})
    n_days = len(days)
    return [
        StopActivityVector(
            s, first_by_day.get(s, 0) / n_days,
            day_dwell.get(s, 0.0), night_dwell.get(s, 0.0),
        )
        for s in stops_seen
    ]


def identify_home_work(vectors: list[StopActivityVector]) -> tuple[StopId, StopId, bool]:
    """Home and work stops from activity vectors.

    Home maximizes earliest-visit probability times exp(night - day dwell);
    the comparison runs in log space so long observation periods cannot
    overflow. Work maximizes the day-night dwell difference. Returns
    (home, work, degenerate) where degenerate marks a single-stop passenger.
    """
    if not vectors:
        raise ValueError("no activity vectors")
    if len(vectors) == 1:
        return vectors[0].stop, vectors[0].stop, True

    def home_score(v: StopActivityVector) -> float:
        if v.earliest_prob <= 0:
            return -math.inf
        return math.log(v.earliest_prob) + (v.night_dwell_h - v.day_dwell_h)

    home = max(vectors, key=lambda v: (home_score(v), v.stop)).stop
    work = max(vectors, key=lambda v: (v.day_dwell_h - v.night_dwell_h, v.stop)).stop
    return home, work, False


# ---------------------------------------------------------------------------
# population-level clustering
# ---------------------------------------------------------------------------

def behavior_vectors(per_passenger: dict[str, list[ClosedChain]]) -> tuple[list[str], np.ndarray]:
    """Top-5 chain usage shares per passenger, zero-padded."""
    cards = sorted(per_passenger)
    out = np.zeros((len(cards), 5))
    for i, card in enumerate(cards):
        usages = sorted((c.usage for c in per_passenger[card]), reverse=True)[:5]
        total = sum(c.usage for c in per_passenger[card])
        if total > 0:
            out[i, :len(usages)] = np.array(usages) / total
    return cards, out


def pca_project(vectors: np.ndarray, n_components: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Principal-component projection via eigendecomposition of the covariance."""
    centered = vectors - vectors.mean(axis=0)
    cov = np.cov(centered, rowvar=False)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:n_components]
    components = eigvecs[:, order]
    return centered @ components, components


def dbscan(points: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Plain density scan; labels start at 0, noise is -1."""
    n = len(points)
    labels = np.full(n, -1)
    d2 = ((points[:, None, :] - points[None, :, :]) ** 2).sum(-1)
    neighbors = [np.flatnonzero(d2[i] <= eps * eps) for i in range(n)]
    core = np.array([len(nb) >= min_pts for nb in neighbors])
    cluster = 0
    for i in range(n):
        if labels[i] != -1 or not core[i]:
            continue
        queue = [i]
        labels[i] = cluster
        while queue:
            j = queue.pop()
            for k in neighbors[j]:
                if labels[k] == -1:
                    labels[k] = cluster
                    if core[k]:
                        queue.append(k)
        cluster += 1
    return labels


def behavior_cluster(per_passenger: dict[str, list[ClosedChain]],
                     eps: float = 0.08, min_pts: int = 20):
    """PCA to 2-D then density clustering of behavior-distribution vectors."""
    cards, vectors = behavior_vectors(per_passenger)
    if len(cards) < 2:
        return cards, vectors, np.zeros((len(cards), 2)), np.zeros(len(cards), dtype=int)
    projected, _ = pca_project(vectors, 2)
    scale = projected.std(axis=0)
    scale[scale == 0] = 1.0
    normalized = projected / scale
    if len(cards) < min_pts:
        labels = np.zeros(len(cards), dtype=int)
    else:
        labels = dbscan(normalized, eps, min_pts)
    return cards, vectors, projected, labels


def region_vectors(
    per_passenger: dict[str, list[ClosedChain]],
    chain_stops: dict[str, dict[tuple[int, ...], list[StopId]]],
    region_of: dict[StopId, str],
    home_region: dict[str, str],
) -> tuple[list[str], np.ndarray]:
    """Per passenger: usage shares of inter / intra / outside chain classes."""
    cards = sorted(per_passenger)
    out = np.zeros((len(cards), 3))
    for i, card in enumerate(cards):
        home = home_region.get(card)
        if home is None:
            raise ValueError(f"no home region for {card}")
        total = sum(c.usage for c in per_passenger[card])
        if total == 0:
            continue
        for chain in per_passenger[card]:
            regions = {region_of[s] for s in chain_stops[card][chain.vertices]}
            if regions == {home}:
                out[i, 1] += chain.usage            # intra
            elif home in regions:
                out[i, 0] += chain.usage            # inter
            else:
                out[i, 2] += chain.usage            # outside
        out[i] /= total
    return cards, out


def kmeans_cluster(vectors: np.ndarray, k: int = 3, seed: int = 7):
    centroids, labels = kmeans2(vectors, k, minit="++", seed=seed)
    inertia = float(((vectors - centroids[labels]) ** 2).sum())
    return labels, centroids, inertia


def extract_corridors(
    per_passenger: dict[str, PassengerChains],
    coverage: float = 0.85,
) -> dict[tuple[StopId, StopId], float]:
    """Road-segment usage weights from each passenger's main chains.

    For every passenger, take the smallest prefix of usage-sorted chains
    covering at least ``coverage`` of their chained trips, collect the ride
    segments of the member records, and accumulate one passenger-fraction per
    segment.
    """
    weights: Counter = Counter()
    n = len(per_passenger)
    if n == 0:
        return {}
    for card in sorted(per_passenger):
        pc = per_passenger[card]
        if not pc.chains:
            continue
        ordered = sorted(pc.chains, key=lambda c: (-c.usage, c.vertices))
        total = sum(c.usage * len(c.vertices) for c in ordered)
        picked: list[ClosedChain] = []
        acc = 0
        for chain in ordered:
            picked.append(chain)
            acc += chain.usage * len(chain.vertices)
            if acc >= coverage * total:
                break
        cluster_ids = {v for c in picked for v in c.vertices}
        segments = set()
        by_id = {c.cluster_id: c for c in pc.clusters}
        for cid in cluster_ids:
            for idx in by_id[cid].member_idx:
                segments.update(pc.records[idx].segments)
        for seg in segments:
            weights[seg] += 1.0 / n
    return dict(weights)
