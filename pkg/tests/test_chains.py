import math

import numpy as np
import pytest

from otdkit import chains as ch
from otdkit.chains import (
    ClosedChain, MiningParams, StopActivityVector, TripRecord,
    associate_open_trips, behavior_vectors, behavior_cluster, build_activity_vectors,
    build_htg, cluster_trips, completeness, dbscan, extract_corridors,
    find_closed_chains, identify_home_work, kmeans_cluster, mine_chains,
    pca_project, region_vectors, trip_similarity,
)
from otdkit.model import Stop, distance

BASE_LAT, BASE_LON = 22.3, 113.5
M_PER_DEG_LAT = 110574.0


def stop_at(sid, x_m, y_m):
    lat = BASE_LAT + y_m / M_PER_DEG_LAT
    lon = BASE_LON + x_m / (111320.0 * math.cos(math.radians(BASE_LAT)))
    return Stop(sid, sid, lat, lon)


def rec(card, day, o, d, t=None, seq=0, segments=()):
    t = t if t is not None else 100 * 86400 + day * 86400 + 28800 + seq * 3600
    return TripRecord(card, 100 + day, o, d, t, t + 1200, segments)


@pytest.fixture
def geo():
    return {
        "H1": stop_at("H1", 0, 0),
        "H2": stop_at("H2", 400, 0),
        "S": stop_at("S", 6000, 0),
        "W": stop_at("W", 0, 7000),
        "Q": stop_at("Q", 9000, 9000),
    }


class TestTripSimilarity:
    def test_identical(self, geo):
        a = rec("c", 0, "H1", "S")
        assert trip_similarity(a, a, geo) == 0.0

    def test_sum_of_walks(self, geo):
        a = rec("c", 0, "H1", "S")
        b = rec("c", 0, "H2", "S")
        d = trip_similarity(a, b, geo)
        assert d == pytest.approx(distance(geo["H1"].position, geo["H2"].position), rel=1e-6)

    def test_reversed_is_infinite(self, geo):
        a = rec("c", 0, "H1", "S")
        b = rec("c", 0, "S", "H1")
        assert trip_similarity(a, b, geo) == math.inf

    def test_degenerate_is_infinite(self, geo):
        a = rec("c", 0, "H1", "H1")
        b = rec("c", 0, "H1", "S")
        assert trip_similarity(a, b, geo) == math.inf


class TestClusterTrips:
    def test_identical_trips_one_cluster(self, geo):
        records = [rec("c", d, "H1", "S") for d in range(5)]
        clusters = cluster_trips(records, geo)
        assert len(clusters) == 1
        assert clusters[0].frequency == 5

    def test_two_far_ods_two_clusters(self, geo):
        records = [rec("c", d, "H1", "S") for d in range(5)]
        records += [rec("c", d, "H1", "W", seq=1) for d in range(5)]
        clusters = cluster_trips(records, geo)
        assert len(clusters) == 2

    def test_near_duplicate_od_merges(self, geo):
        records = [rec("c", d, "H1", "S") for d in range(5)]
        records.append(rec("c", 5, "H2", "S"))  # 400 m away, same direction
        clusters = cluster_trips(records, geo)
        assert len(clusters) == 1
        assert clusters[0].frequency == 6

    def test_prune_small_clusters(self, geo):
        records = [rec("c", d, "H1", "S") for d in range(40)]
        records.append(rec("c", 40, "H1", "W"))
        clusters = cluster_trips(records, geo, MiningParams(prune_fraction=0.03))
        # 1 of 41 trips < ceil(0.03*41)=2: pruned
        assert len(clusters) == 1


class TestHtg:
    def test_single_cluster_no_edges(self, geo):
        records = [rec("c", 0, "H1", "S")]
        clusters = cluster_trips(records, geo)
        htg = build_htg(records, clusters, geo)
        assert len(htg.clusters) == 1
        assert htg.edges[0] == ()

    def test_three_distinct_journeys_three_vertices(self, geo):
        records = [rec("c", 0, "H1", "S", seq=0), rec("c", 0, "S", "W", seq=1),
                   rec("c", 0, "W", "H1", seq=2)]
        clusters = cluster_trips(records, geo)
        htg = build_htg(records, clusters, geo)
        assert len(htg.clusters) == 3

    def test_commute_pair_mutual_edges(self, geo):
        records = []
        for d in range(3):
            records.append(rec("c", d, "H1", "W", seq=0))
            records.append(rec("c", d, "W", "H1", seq=1))
        clusters = cluster_trips(records, geo)
        htg = build_htg(records, clusters, geo)
        ids = {(c.origin, c.dest): c.cluster_id for c in clusters}
        hw, wh = ids[("H1", "W")], ids[("W", "H1")]
        assert wh in htg.edges[hw]
        assert hw in htg.edges[wh]  # via the next-day overlay


class TestFindClosedChains:
    def test_mutual_pair_one_chain(self, geo):
        records = []
        for d in range(4):
            records.append(rec("c", d, "H1", "W", seq=0))
            records.append(rec("c", d, "W", "H1", seq=1))
        result = mine_chains("c", records, geo)
        assert len(result.chains) == 1
        chain = result.chains[0]
        assert len(chain.vertices) == 2
        assert chain.usage == 4
        assert chain.closure_m <= 500.0

    def test_station_level_artifacts_absent(self, geo):
        # H1->S and S->H1 each with a transfer at T, plus H1->W, W->H2
        records = []
        for d in range(2):
            records.append(rec("c", d, "H1", "S", seq=0))
            records.append(rec("c", d, "S", "H1", seq=1))
            records.append(rec("c", d, "H1", "W", seq=2))
            records.append(rec("c", d, "W", "H2", seq=3))
        result = mine_chains("c", records, geo, MiningParams(prune_fraction=0.0))
        found = {tuple(sorted((result.clusters[v].origin, result.clusters[v].dest)
                              for v in c.vertices)) for c in result.chains}
        expected = {
            tuple(sorted([("H1", "S"), ("S", "H1")])),
            tuple(sorted([("H1", "W"), ("W", "H2")])),
        }
        assert found == expected

    def test_budget_conservation(self, geo):
        records = []
        for d in range(5):
            records.append(rec("c", d, "H1", "W", seq=0))
            records.append(rec("c", d, "W", "H1", seq=1))
        records.append(rec("c", 5, "H1", "W"))  # odd leftover
        result = mine_chains("c", records, geo)
        usage_per_vertex = {}
        for chain in result.chains:
            for v in chain.vertices:
                usage_per_vertex[v] = usage_per_vertex.get(v, 0) + chain.usage
        for v, used in usage_per_vertex.items():
            assert used <= result.htg.usage[v]

    def test_closure_radius_respected(self, geo):
        # W->Q destination ~9 km from H1: no loop
        records = [rec("c", 0, "H1", "W", seq=0), rec("c", 0, "W", "Q", seq=1)]
        result = mine_chains("c", records, geo, MiningParams(prune_fraction=0.0))
        assert result.chains == []
        for chain in result.chains:
            assert chain.closure_m <= 500.0


class TestAssociation:
    def _chain(self, vertices, usage=1):
        return ClosedChain(tuple(vertices), usage, 0.0, 1000.0)

    def test_empty_day(self):
        mapping, leftover = associate_open_trips([self._chain([0, 1])], [])
        assert mapping == {} and leftover == []

    def test_support_coverage_pick(self):
        chains = [self._chain([0, 1, 2]), self._chain([3, 4])]
        day = [(10, 0), (11, 1)]
        mapping, leftover = associate_open_trips(chains, day)
        assert mapping == {(0, 1, 2): [10, 11]}
        assert leftover == []

    def test_greedy_matches_exhaustive_on_small_instances(self):
        rng = np.random.default_rng(17)
        for trial in range(30):
            n_chains = int(rng.integers(2, 8))
            chains = []
            for i in range(n_chains):
                size = int(rng.integers(2, 5))
                verts = tuple(rng.choice(20, size=size, replace=False).tolist())
                chains.append(self._chain(verts))
            day = [(i, int(rng.integers(0, 20))) for i in range(int(rng.integers(1, 8)))]
            mapping, leftover = associate_open_trips(chains, day)
            covered = sum(len(v) for v in mapping.values())
            # exhaustive best coverage with any chain subset
            best = 0
            vsets = [set(c.vertices) for c in chains]
            for mask in range(1 << n_chains):
                claim = set()
                for i in range(n_chains):
                    if mask >> i & 1:
                        claim |= vsets[i]
                best = max(best, sum(1 for _, c in day if c in claim))
            assert covered == best

    def test_no_double_assignment(self):
        chains = [self._chain([0, 1]), self._chain([1, 2])]
        day = [(0, 0), (1, 1), (2, 2)]
        mapping, leftover = associate_open_trips(chains, day)
        claimed = [i for lst in mapping.values() for i in lst]
        assert len(claimed) == len(set(claimed))
        assert sorted(claimed + leftover) == [0, 1, 2]


class TestCompleteness:
    def test_full(self):
        chains = [ClosedChain((0, 1), 5, 0.0, 1.0)]
        assert completeness(chains, 10) == 1.0

    def test_partial(self):
        chains = [ClosedChain((0, 1), 4, 0.0, 1.0)]
        assert completeness(chains, 10) == pytest.approx(0.8)

    def test_zero_trips_undefined(self):
        with pytest.raises(ValueError):
            completeness([], 0)


class TestHomeWork:
    def test_formula_tradeoff(self):
        a = StopActivityVector("A", 0.8, 1.0, 4.0)   # score 0.8*e^3 = 16.07
        b = StopActivityVector("B", 0.2, 0.0, 5.0)   # score 0.2*e^5 = 29.68
        home, work, degenerate = identify_home_work([a, b])
        assert home == "B"
        assert not degenerate

    def test_work_maximizes_day_minus_night(self):
        a = StopActivityVector("A", 0.9, 1.0, 10.0)
        b = StopActivityVector("B", 0.0, 9.0, 1.0)
        home, work, _ = identify_home_work([a, b])
        assert home == "A" and work == "B"

    def test_single_stop_degenerate(self):
        v = StopActivityVector("A", 1.0, 2.0, 3.0)
        home, work, degenerate = identify_home_work([v])
        assert home == work == "A" and degenerate

    def test_large_dwell_totals_no_overflow(self):
        a = StopActivityVector("A", 0.9, 20.0, 900.0)
        b = StopActivityVector("B", 0.1, 800.0, 30.0)
        home, work, _ = identify_home_work([a, b])
        assert home == "A" and work == "B"

    def test_activity_vector_windows(self):
        day0 = 200 * 86400
        records = [
            TripRecord("c", 200, "H", "W", day0 + 8 * 3600, day0 + 9 * 3600),
            TripRecord("c", 200, "W", "H", day0 + 18 * 3600, day0 + 19 * 3600),
        ]
        vectors = {v.stop: v for v in build_activity_vectors(records)}
        # W dwell 09:00-18:00 -> 9h daytime, 1h night (17-18)
        assert vectors["W"].day_dwell_h == pytest.approx(9.0)
        assert vectors["W"].night_dwell_h == pytest.approx(1.0)
        assert vectors["H"].earliest_prob == 1.0


class TestBehaviorClustering:
    def test_single_chain_vector(self):
        per = {"c": [ClosedChain((0, 1), 7, 0.0, 1.0)]}
        cards, vectors = behavior_vectors(per)
        assert vectors[0].tolist() == [1.0, 0, 0, 0, 0]

    def test_shares_sum_below_one(self):
        rng = np.random.default_rng(3)
        per = {}
        for i in range(20):
            per[f"c{i}"] = [ClosedChain((0, k), int(rng.integers(1, 9)), 0.0, 1.0)
                            for k in range(1, int(rng.integers(2, 9)))]
        _, vectors = behavior_vectors(per)
        assert (vectors.sum(axis=1) <= 1.0 + 1e-9).all()

    def test_pca_matches_power_iteration_oracle(self):
        rng = np.random.default_rng(11)
        vectors = rng.random((40, 5)) * np.array([3.0, 1.5, 0.7, 0.3, 0.1])
        projected, components = pca_project(vectors, 2)
        cov = np.cov(vectors - vectors.mean(axis=0), rowvar=False)
        mat = cov.copy()
        for k in range(2):
            v = np.ones(5) / np.sqrt(5)
            for _ in range(2000):
                v = mat @ v
                v /= np.linalg.norm(v)
            lam = v @ mat @ v
            assert abs(abs(v @ components[:, k]) - 1.0) < 1e-6
            mat = mat - lam * np.outer(v, v)

    def test_dbscan_separates_blobs(self):
        rng = np.random.default_rng(2)
        a = rng.normal((0, 0), 0.05, (30, 2))
        b = rng.normal((5, 5), 0.05, (30, 2))
        labels = dbscan(np.vstack([a, b]), eps=0.5, min_pts=5)
        assert len({l for l in labels[:30]}) == 1
        assert len({l for l in labels[30:]}) == 1
        assert labels[0] != labels[30]

    def test_behavior_cluster_few_passengers_single_cluster(self):
        per = {"a": [ClosedChain((0, 1), 3, 0.0, 1.0)],
               "b": [ClosedChain((0, 1), 2, 0.0, 1.0)],
               "c": [ClosedChain((0, 1), 2, 0.0, 1.0)]}
        cards, vectors, projected, labels = behavior_cluster(per, min_pts=20)
        assert set(labels) == {0}


class TestRegionConnectivity:
    def test_all_intra(self):
        per = {"c": [ClosedChain((0, 1), 4, 0.0, 1.0)]}
        chain_stops = {"c": {(0, 1): ["H", "S"]}}
        region_of = {"H": "town_a", "S": "town_a"}
        cards, vectors = region_vectors(per, chain_stops, region_of, {"c": "town_a"})
        assert vectors[0].tolist() == [0.0, 1.0, 0.0]

    def test_components_bounded(self):
        per = {"c": [ClosedChain((0, 1), 2, 0.0, 1.0), ClosedChain((2, 3), 1, 0.0, 1.0)]}
        chain_stops = {"c": {(0, 1): ["H", "S"], (2, 3): ["X", "Y"]}}
        region_of = {"H": "town_a", "S": "downtown", "X": "downtown", "Y": "downtown"}
        cards, vectors = region_vectors(per, chain_stops, region_of, {"c": "town_a"})
        assert vectors.sum() <= 1.0 + 1e-9
        assert vectors[0][0] == pytest.approx(2 / 3)
        assert vectors[0][2] == pytest.approx(1 / 3)

    def test_missing_region_map_errors(self):
        per = {"c": [ClosedChain((0, 1), 1, 0.0, 1.0)]}
        with pytest.raises(ValueError):
            region_vectors(per, {"c": {(0, 1): ["H"]}}, {"H": "x"}, {})

    def test_kmeans_beats_random_assignments(self):
        rng = np.random.default_rng(6)
        pts = np.vstack([rng.normal((0, 0, 1), 0.05, (20, 3)),
                         rng.normal((1, 0, 0), 0.05, (20, 3)),
                         rng.normal((0, 1, 0), 0.05, (20, 3))])
        labels, centroids, inertia = kmeans_cluster(pts, 3, seed=1)
        for _ in range(100):
            rand_labels = rng.integers(0, 3, len(pts))
            cost = 0.0
            for k in range(3):
                sel = pts[rand_labels == k]
                if len(sel):
                    cost += ((sel - sel.mean(axis=0)) ** 2).sum()
            assert inertia <= cost + 1e-9


class TestCorridors:
    def test_single_chain_full_weight(self, geo):
        records = []
        for d in range(3):
            records.append(rec("c", d, "H1", "W", seq=0, segments=(("H1", "M"), ("M", "W"))))
            records.append(rec("c", d, "W", "H1", seq=1, segments=(("W", "M"), ("M", "H1"))))
        pc = mine_chains("c", records, geo)
        weights = extract_corridors({"c": pc})
        assert weights
        assert all(w == pytest.approx(1.0) for w in weights.values())
        assert ("H1", "M") in weights

    def test_prefix_rule(self):
        # three 2-trip chains with usages 6/3/1 -> shares 0.6/0.3/0.1, first two picked
        from otdkit.chains import HyperTripGraph, PassengerChains, TripCluster
        recs, clusters = [], []
        idx = 0
        for tag, usage in (("x", 6), ("y", 3), ("z", 1)):
            for half in ("o", "r"):
                members = []
                for _ in range(usage):
                    recs.append(TripRecord("c", idx, f"{tag}{half}1", f"{tag}{half}2",
                                           1000 + idx, 2000 + idx,
                                           ((f"{tag}a", f"{tag}b"),)))
                    members.append(idx)
                    idx += 1
                clusters.append(TripCluster(len(clusters), f"{tag}{half}1",
                                            f"{tag}{half}2", tuple(members)))
        chains_list = [
            ClosedChain((0, 1), 6, 0.0, 1.0),
            ClosedChain((2, 3), 3, 0.0, 1.0),
            ClosedChain((4, 5), 1, 0.0, 1.0),
        ]
        pc = PassengerChains("c", recs, clusters, HyperTripGraph(clusters, {}, {}), chains_list)
        weights = extract_corridors({"c": pc}, coverage=0.85)
        assert ("xa", "xb") in weights
        assert ("ya", "yb") in weights
        assert ("za", "zb") not in weights
