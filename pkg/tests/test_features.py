import networkx as nx
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from appraisal.dataset import PropertyRecord
from appraisal.exceptions import DataError, SchemaError
from appraisal.features import (FirstComponentPCA, RBFSurface, RoadGraph, build_feature_table,
                                count_within_radius, development_of_road_network, distance_to_nearest,
                                harmonic_centrality, parse_poi, pca_first_component, project, ratio_feature,
                                rbf_eval, rbf_fit, road_distance, unproject)


def random_graph(seed, n=12, p=0.25):
    rng = np.random.default_rng(seed)
    nodes = {f"v{i}": (131.9 + rng.uniform(-0.01, 0.01), 43.1 + rng.uniform(-0.01, 0.01)) for i in range(n)}
    edges = [(f"v{i}", f"v{j}", float(rng.uniform(1, 100)))
             for i in range(n) for j in range(n) if i != j and rng.random() < p]
    return RoadGraph(nodes, tuple(edges))


def to_networkx(g):
    G = nx.DiGraph()
    G.add_nodes_from(g.node_ids)
    for a, b, w in g.edges:
        if not G.has_edge(a, b) or G[a][b]["weight"] > w:
            G.add_edge(a, b, weight=w)
    return G


@pytest.mark.parametrize("seed", range(8))
def test_harmonic_centrality_matches_networkx(seed):
    g = random_graph(seed)
    ours = harmonic_centrality(g)
    G = to_networkx(g)
    # incoming distances: d(v, u) for all v
    for u in g.node_ids:
        d = nx.single_source_dijkstra_path_length(G.reverse(), u, weight="weight")
        want = sum(1.0 / dv for v, dv in d.items() if v != u)
        assert ours[u] == pytest.approx(want, rel=1e-12, abs=1e-15)


def test_harmonic_centrality_blocks_and_workers_agree():
    g = random_graph(3, n=30)
    a = harmonic_centrality(g, block=4, n_jobs=2)
    b = harmonic_centrality(g)
    assert a == b


@pytest.mark.parametrize("seed", range(4))
def test_road_distance_matches_networkx(seed):
    g = random_graph(seed)
    G = to_networkx(g)
    for a in ("v0", "v3"):
        for b in ("v5", "v7", "v0"):
            ours = road_distance(g, a, b)
            try:
                want = nx.dijkstra_path_length(G, a, b, weight="weight")
            except nx.NetworkXNoPath:
                want = None
            assert ours == (pytest.approx(want) if want is not None else None)


def test_graph_validation_and_csv():
    with pytest.raises(DataError):
        RoadGraph({"a": (0, 0)}, (("a", "b", 1.0),))
    with pytest.raises(DataError):
        RoadGraph({"a": (0, 0), "b": (0, 0)}, (("a", "b", 0.0),))
    g = RoadGraph.from_csv("id,lon,lat\na,0,0\nb,0,1\n", "from_id,to_id,length_m,oneway\na,b,5,0\n")
    assert road_distance(g, "b", "a") == 5.0
    with pytest.raises(SchemaError):
        RoadGraph.from_csv("id,x,y\n", "from_id,to_id,length_m\n")
    assert road_distance(g.with_edge("a", "b", 2.0), "a", "b") == 2.0


@given(st.integers(0, 2**31 - 1), st.integers(2, 60))
def test_rbf_interpolates_sites(seed, m):
    rng = np.random.default_rng(seed)
    sites = rng.uniform(0, 1000, size=(m, 2))
    v = rng.normal(size=m)
    s = rbf_fit(sites, v)
    np.testing.assert_allclose(rbf_eval(s, sites), v, atol=1e-6)


def test_rbf_linear_kernel_form_and_errors():
    sites = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]])
    s = RBFSurface().fit(sites, [1.0, 2.0, 3.0])
    q = np.array([[0.3, 0.4]])
    want = -sum(c * np.hypot(*(q[0] - x)) for c, x in zip(s.coef_, sites))
    assert s.predict(q)[0] == pytest.approx(want)
    with pytest.raises(DataError):
        RBFSurface().fit(np.array([[0.0, 0.0], [0.0, 0.0]]), [1.0, 2.0])


def test_projection_round_trip_and_scale():
    origin = (131.9, 43.1)
    ll = np.array([[131.9, 43.1], [131.91, 43.1], [131.9, 43.11]])
    xy = project(ll, origin)
    np.testing.assert_allclose(xy[0], 0.0, atol=1e-9)
    assert xy[2, 1] == pytest.approx(6_371_000 * np.radians(0.01))
    assert xy[1, 0] == pytest.approx(6_371_000 * np.radians(0.01) * np.cos(np.radians(43.1)))
    np.testing.assert_allclose(unproject(xy, origin), ll, atol=1e-12)


def test_counts_and_distances():
    obj = np.array([[0.0, 0.0], [10.0, 0.0]])
    poi = np.array([[3.0, 4.0], [10.0, 1.0], [100.0, 0.0]])
    np.testing.assert_array_equal(count_within_radius(obj, poi, 5.0), [1, 1])
    np.testing.assert_array_equal(count_within_radius(obj, poi, 8.1), [1, 2])
    np.testing.assert_allclose(distance_to_nearest(obj, poi), [5.0, 1.0])
    np.testing.assert_array_equal(count_within_radius(obj, np.zeros((0, 2)), 1.0), [0, 0])
    with pytest.raises(DataError):
        count_within_radius(obj, poi, 0.0)


def test_ratio_and_pca():
    np.testing.assert_allclose(ratio_feature([2.0, 9.0], [4.0, 3.0]), [0.5, 3.0])
    with pytest.raises(DataError, match="index 1"):
        ratio_feature([1.0, 1.0], [1.0, 0.0])
    rng = np.random.default_rng(0)
    base = rng.normal(size=300)
    M = np.column_stack([base + 0.1 * rng.normal(size=300) for _ in range(3)])
    M = (M - M.mean(0)) / M.std(0)
    scores, load, evr = pca_first_component(M)
    C = np.corrcoef(M, rowvar=False)
    w, V = np.linalg.eigh(C)
    v = V[:, -1] * np.sign(V[:, -1].sum())
    np.testing.assert_allclose(load, v, atol=1e-12)
    assert evr == pytest.approx(w[-1] / w.sum())
    np.testing.assert_allclose(scores, M @ v)
    with pytest.raises(DataError):
        FirstComponentPCA().fit(M[:, :1])


def test_parse_poi_csv_and_geojson():
    csv_text = "lon,lat,category\n1,2,shop\n3,4,school\n5,6,shop\n"
    out = parse_poi(csv_text)
    assert out["shop"].shape == (2, 2)
    gj = '{"type":"FeatureCollection","features":[{"geometry":{"type":"Point","coordinates":[1,2]},' \
         '"properties":{"category":"park"}}]}'
    np.testing.assert_array_equal(parse_poi(gj)["park"], [[1.0, 2.0]])
    with pytest.raises(SchemaError):
        parse_poi("x,y\n1,2\n")


def _records():
    rng = np.random.default_rng(1)
    return [PropertyRecord(id=str(i), segment="land_parcel", source="offer",
                           lon=131.9 + rng.uniform(-0.02, 0.02), lat=43.1 + rng.uniform(-0.02, 0.02),
                           area=float(rng.uniform(500, 2000)), total_price=float(rng.uniform(1e6, 5e6)),
                           attributes={"utilities": "yes" if i % 2 else "no", "rooms": float(i % 4 + 1)})
            for i in range(40)]


def test_build_feature_table_all_kinds():
    recs = _records()
    origin = (131.9, 43.1)
    graph = RoadGraph({f"n{i}{j}": (131.88 + 0.01 * i, 43.08 + 0.01 * j) for i in range(5) for j in range(5)},
                      tuple((f"n{i}{j}", f"n{i + di}{j + dj}", 800.0)
                            for i in range(5) for j in range(5) for di, dj in ((1, 0), (0, 1), (-1, 0), (0, -1))
                            if 0 <= i + di < 5 and 0 <= j + dj < 5))
    layers = {"shop": np.array([[131.9, 43.1], [131.91, 43.1]])}
    defs = [
        {"name": "area", "kind": "area"},
        {"name": "rooms", "kind": "attribute", "attribute": "rooms"},
        {"name": "util", "kind": "one_hot", "attribute": "utilities", "value": "yes"},
        {"name": "d_center", "kind": "distance_to_point", "lon": 131.9, "lat": 43.1},
        {"name": "d_shop", "kind": "distance_to_nearest", "layer": "shop"},
        {"name": "n_shop", "kind": "count_within", "layer": "shop", "radius_m": 2000},
        {"name": "road_d", "kind": "road_distance_to", "lon": 131.9, "lat": 43.1},
        {"name": "road_dev", "kind": "road_network_development"},
        {"name": "agg", "kind": "pca", "inputs": ["d_center", "d_shop"], "include": False},
        {"name": "area_per_room", "kind": "ratio", "numerator": "area", "denominator": "rooms"},
    ]
    t = build_feature_table(recs, defs, origin=origin, layers=layers, graph=graph, target="log_psmp")
    assert t.names == ["area", "rooms", "util", "d_center", "d_shop", "n_shop", "road_d", "road_dev",
                       "area_per_room"]
    assert t.columns[2].kind == "binary"
    np.testing.assert_allclose(t.target, np.log([r.psmp for r in recs]))
    np.testing.assert_allclose(t.column("area_per_room"), t.column("area") / t.column("rooms"))
    np.testing.assert_allclose(t.column("d_center"), np.hypot(*t.coords.T), rtol=1e-12)
    assert np.all(t.column("road_d") >= 0)
    with pytest.raises(SchemaError):
        build_feature_table(recs, [{"name": "x", "kind": "magic"}])
    with pytest.raises(DataError):
        build_feature_table(recs, [{"name": "x", "kind": "distance_to_nearest", "layer": "metro"}])
    with pytest.raises(DataError):
        build_feature_table(recs, [{"name": "x", "kind": "road_distance_to", "lon": 0, "lat": 0}])


def test_development_surface_subsampling_is_seeded():
    g = random_graph(1, n=40, p=0.2)
    xy = project(np.array([[131.9, 43.1], [131.905, 43.1]]), (131.9, 43.1))
    a = development_of_road_network(g, xy, (131.9, 43.1), max_nodes=10, subsample=20, seed=4)
    b = development_of_road_network(g, xy, (131.9, 43.1), max_nodes=10, subsample=20, seed=4)
    np.testing.assert_array_equal(a, b)
