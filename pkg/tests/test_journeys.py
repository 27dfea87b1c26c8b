import numpy as np
import pytest

from otdkit.journeys import (
    Journey, JourneyBuilder, JourneyBuilderParams, StopEquivalence, Trip,
    cluster_segment_profiles, day_similarity, estimate_home, occupancy,
    route_flow_counts, segment_profiles,
)
from otdkit.model import Route, Stop, StopEvent, SwipeRecord, TripRun


def grid_stop(sid, i, j, spacing=0.012):
    # ~1.3 km spacing so distinct stops never fall inside the 300 m equivalence
    return Stop(sid, sid, 22.0 + i * spacing, 113.0 + j * spacing)


def make_world():
    """Two crossing lines: L1 A-B-C-D-E (west-east), L2 C-F-G (south-north)."""
    stops = {}
    for j, sid in enumerate("ABCDE"):
        stops[sid] = grid_stop(sid, 0, j)
    stops["F"] = grid_stop("F", 1, 2)
    stops["G"] = grid_stop("G", 2, 2)
    # near-C stop for walk-transfer scenarios (~300-500 m from C)
    stops["C2"] = Stop("C2", "C2", stops["C"].lat + 0.003, stops["C"].lon)
    routes = {
        "L1-up": Route("L1-up", "up", tuple("ABCDE"), 10.0),
        "L1-down": Route("L1-down", "down", tuple("EDCBA"), 10.0),
        "L2-up": Route("L2-up", "up", ("C", "F", "G"), 12.0),
        "L2-down": Route("L2-down", "down", ("G", "F", "C"), 12.0),
        "L3-up": Route("L3-up", "up", ("C2", "F", "G"), 12.0),
    }
    return stops, routes


def run_on(route_id, stops_seq, t0, vehicle, seg=180, dwell=30, trip=0):
    events = []
    t = t0
    for s in stops_seq:
        events.append(StopEvent(vehicle, route_id, s, t, t + dwell))
        t += dwell + seg
    return TripRun(vehicle, route_id, trip, tuple(events))


DAY0 = 100 * 86400


class TestContinuousInference:
    def _builder(self, runs):
        stops, routes = make_world()
        return JourneyBuilder(stops, routes, runs)

    def test_next_boarding_downstream(self):
        runs = [run_on("L1-up", "ABCDE", DAY0 + 28800, "v1"),
                run_on("L2-up", "CFG", DAY0 + 30000, "v2")]
        b = self._builder(runs)
        matched = [
            SwipeRecord("c1", DAY0 + 28805, "v1", "L1-up", "A"),
            SwipeRecord("c1", DAY0 + 30005, "v2", "L2-up", "C"),
        ]
        journeys = b.build(matched)
        first_trip = journeys[0].trips[0]
        assert first_trip.alight_stop == "C"
        assert first_trip.alight_method == "continuous"

    def test_walk_radius_match(self):
        # passenger alights at C, walks ~330 m to C2, boards L3
        runs = [run_on("L1-up", "ABCDE", DAY0 + 28800, "v1"),
                run_on("L3-up", ("C2", "F", "G"), DAY0 + 30000, "v3")]
        b = self._builder(runs)
        matched = [
            SwipeRecord("c1", DAY0 + 28805, "v1", "L1-up", "A"),
            SwipeRecord("c1", DAY0 + 30005, "v3", "L3-up", "C2"),
        ]
        journeys = b.build(matched)
        first_trip = journeys[0].trips[0]
        assert first_trip.alight_stop == "C"

    def test_far_next_boarding_unresolved_by_stage1(self):
        # next boarding G is > 700 m from every downstream stop reached in time
        runs = [run_on("L1-up", "ABCDE", DAY0 + 28800, "v1"),
                run_on("L2-up", "CFG", DAY0 + 28900, "v2", seg=60)]
        b = self._builder(runs)
        matched = [
            SwipeRecord("c1", DAY0 + 28805, "v1", "L1-up", "A"),
            SwipeRecord("c1", DAY0 + 29085, "v2", "L2-up", "G"),
        ]
        per_card = b.build_trips(matched)
        b.resolve_card(per_card["c1"])
        first = per_card["c1"][matched[0].ts // 86400][0]
        assert first.alight_method != "continuous"


class TestEstimateHome:
    def test_unanimous(self):
        obs = [("H", DAY0 + 28800)] * 5
        assert estimate_home(obs) == "H"

    def test_mode(self):
        obs = [("H", DAY0 + 28800)] * 6 + [("W", DAY0 + 30000)] * 4
        assert estimate_home(obs) == "H"

    def test_tie_breaks_on_earliest_median(self):
        obs = [("H", DAY0 + 25000), ("H", DAY0 + 25200),
               ("W", DAY0 + 40000), ("W", DAY0 + 40100)]
        assert estimate_home(obs) == "H"


class TestLastAlighting:
    def _setup(self, next_day_first=None):
        stops, routes = make_world()
        runs = [
            run_on("L1-up", "ABCDE", DAY0 + 28800, "v1"),
            run_on("L1-down", "EDCBA", DAY0 + 60000, "v2"),
        ]
        b = JourneyBuilder(stops, routes, runs)
        matched = [
            SwipeRecord("c1", DAY0 + 28805, "v1", "L1-up", "A"),
            SwipeRecord("c1", DAY0 + 60005, "v2", "L1-down", "E"),
        ]
        if next_day_first:
            runs.append(run_on("L2-up", "CFG", DAY0 + 86400 + 25000, "v3"))
            b = JourneyBuilder(stops, routes, runs)
            matched.append(SwipeRecord("c1", DAY0 + 86400 + 25005, "v3", "L2-up", next_day_first))
        return b, matched

    def test_same_day_first_boarding_reference(self):
        b, matched = self._setup()
        per_card = b.build_trips(matched)
        b.resolve_card(per_card["c1"])
        last = per_card["c1"][DAY0 // 86400][-1]
        assert last.alight_stop == "A"
        assert last.alight_method == "closed_chain"


class TestDaySimilarity:
    def _equiv(self):
        stops, routes = make_world()
        # isolated routes so no cross-equivalence: drop adjacency by passing none
        return StopEquivalence(stops, {}, radius_m=1.0)

    def test_identical(self):
        eq = self._equiv()
        assert day_similarity({"A", "B"}, {"A", "B"}, eq) == 1.0

    def test_half_overlap(self):
        eq = self._equiv()
        assert day_similarity({"A", "B", "C"}, {"B", "C", "D"}, eq) == pytest.approx(0.5)

    def test_symmetric(self):
        eq = self._equiv()
        a, b = {"A", "C", "E"}, {"B", "C"}
        assert day_similarity(a, b, eq) == day_similarity(b, a, eq)

    def test_equivalence_merges_close_stops(self):
        stops, routes = make_world()
        eq = StopEquivalence(stops, {}, radius_m=400.0)  # C and C2 are ~330 m apart
        assert day_similarity({"C"}, {"C2"}, eq) == 1.0


class TestProbabilistic:
    def test_empirical_argmax(self):
        stops, routes = make_world()
        runs = [run_on("L1-up", "ABCDE", DAY0 + d * 86400 + 28800, f"v{d}", trip=d)
                for d in range(11)]
        b = JourneyBuilder(stops, routes, runs)
        matched = []
        # 10 days: board A, alight C (resolved via next boarding at C)
        for d in range(10):
            base = DAY0 + d * 86400
            alight = "C" if d < 8 else "D"
            matched.append(SwipeRecord("c1", base + 28805, f"v{d}", "L1-up", "A"))
            # second ride from the alight stop resolves the first trip there
            runs2 = run_on("L2-up", "CFG", base + 33000, f"w{d}", trip=d)
            b.runs.by_vehicle[f"w{d}"] = [runs2]
            b.runs.starts[f"w{d}"] = [runs2.events[0].arrive_ts]
            if d < 8:
                matched.append(SwipeRecord("c1", base + 33005, f"w{d}", "L2-up", "C"))
            else:
                matched.append(SwipeRecord("c1", base + 29305, f"v{d}", "L1-up", "D"))
        # day 10: single unresolved ride boarding A
        matched.append(SwipeRecord("c1", DAY0 + 10 * 86400 + 28805, "v10", "L1-up", "A"))
        per_card = b.build_trips(matched)
        b.resolve_card(per_card["c1"])
        last_day = per_card["c1"][DAY0 // 86400 + 10]
        assert last_day[0].alight_stop == "C"
        assert last_day[0].alight_method == "probabilistic"


class TestStages:
    def _world_runs(self):
        return [run_on("L1-up", "ABCDE", DAY0 + 28800, "v1"),
                run_on("L2-up", "CFG", DAY0 + 30100, "v2")]

    def test_single_trip_journey(self):
        stops, routes = make_world()
        b = JourneyBuilder(stops, routes, self._world_runs())
        t = Trip("c1", DAY0 // 86400, "v1", "L1-up", "A", DAY0 + 28805,
                 "C", DAY0 + 29220, "continuous")
        journeys = b.identify_stages([t])
        assert len(journeys) == 1
        assert journeys[0].stage_labels == ["O", "D"]

    def test_transfer_merges(self):
        stops, routes = make_world()
        runs = self._world_runs()
        b = JourneyBuilder(stops, routes, runs)
        arrive_c = next(e.arrive_ts for e in runs[0].events if e.stop == "C")
        t1 = Trip("c1", DAY0 // 86400, "v1", "L1-up", "A", DAY0 + 28805,
                  "C", arrive_c, "continuous")
        board_c = next(e.arrive_ts for e in runs[1].events if e.stop == "C")
        t2 = Trip("c1", DAY0 // 86400, "v2", "L2-up", "C", board_c + 5,
                  "G", board_c + 500, "continuous")
        journeys = b.identify_stages([t1, t2])
        assert len(journeys) == 1
        assert journeys[0].stage_labels == ["O", "T", "D"]

    def test_same_line_reboard_splits(self):
        stops, routes = make_world()
        runs = [run_on("L1-up", "ABCDE", DAY0 + 28800, "v1"),
                run_on("L1-up", "ABCDE", DAY0 + 29400, "v1b", trip=1)]
        b = JourneyBuilder(stops, routes, runs)
        arrive_c = next(e.arrive_ts for e in runs[0].events if e.stop == "C")
        t1 = Trip("c1", DAY0 // 86400, "v1", "L1-up", "A", DAY0 + 28805,
                  "C", arrive_c, "continuous")
        board_c = next(e.arrive_ts for e in runs[1].events if e.stop == "C")
        t2 = Trip("c1", DAY0 // 86400, "v1b", "L1-up", "C", board_c + 5,
                  "E", board_c + 500, "continuous")
        journeys = b.identify_stages([t1, t2])
        assert len(journeys) == 2
        assert journeys[0].short_activity_after


class TestOccupancy:
    def test_zero_ridership(self):
        assert occupancy(0, 4) == 0.0

    def test_example(self):
        assert occupancy(60, 4) == pytest.approx(0.5)

    def test_no_vehicles(self):
        assert occupancy(10, 0) is None


def naive_average_linkage(vectors, k):
    """Brute-force agglomerative clustering, average linkage, euclidean."""
    clusters = [[i] for i in range(len(vectors))]
    while len(clusters) > k:
        best = None
        for a in range(len(clusters)):
            for b in range(a + 1, len(clusters)):
                d = np.mean([
                    np.linalg.norm(vectors[i] - vectors[j])
                    for i in clusters[a] for j in clusters[b]
                ])
                if best is None or d < best[0]:
                    best = (d, a, b)
        _, a, b = best
        clusters[a] = clusters[a] + clusters[b]
        del clusters[b]
    return clusters


def partition_key(labels):
    groups = {}
    for i, lab in enumerate(labels):
        groups.setdefault(lab, set()).add(i)
    return frozenset(frozenset(g) for g in groups.values())


class TestSegmentProfiles:
    def test_single_segment_single_cluster(self):
        profiles = {("A", "B"): np.zeros(24)}
        segments, labels, _ = cluster_segment_profiles(profiles)
        assert list(labels) == [1]

    def test_identical_vectors_share_cluster(self):
        v = np.zeros(24)
        v[8] = 5
        w = np.zeros(24)
        w[18] = 9
        profiles = {("A", "B"): v, ("B", "C"): v.copy(), ("C", "D"): w}
        segments, labels, _ = cluster_segment_profiles(profiles, k=2)
        lab = dict(zip(segments, labels))
        assert lab[("A", "B")] == lab[("B", "C")] != lab[("C", "D")]

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(5)
        vectors = rng.random((9, 24))
        profiles = {(f"s{i}", f"s{i+1}"): vectors[i] for i in range(9)}
        segments, labels, _ = cluster_segment_profiles(profiles, k=3)
        order = {seg: i for i, seg in enumerate(sorted(profiles))}
        vecs = np.array([profiles[s] for s in sorted(profiles)])
        oracle = naive_average_linkage(vecs, 3)
        oracle_labels = np.zeros(9, dtype=int)
        for gi, group in enumerate(oracle):
            for i in group:
                oracle_labels[i] = gi
        assert partition_key(labels) == partition_key(oracle_labels)

    def test_profiles_count_hourly(self):
        stops, routes = make_world()
        t = Trip("c1", 0, "v1", "L1-up", "A", DAY0 + 8 * 3600 + 12,
                 "C", DAY0 + 8 * 3600 + 500, "continuous")
        j = Journey("c1", 0, [t])
        profiles = segment_profiles([j], routes)
        assert set(profiles) == {("A", "B"), ("B", "C")}
        assert profiles[("A", "B")][8] == 1
        assert profiles[("A", "B")].sum() == 1
