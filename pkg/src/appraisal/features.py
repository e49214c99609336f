"""Explanatory variables built from geometry: distances, road-network
centrality and its interpolated surface, principal-component aggregates,
ratio features and radius counts.
"""

import csv
import heapq
import io
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse
from joblib import Parallel, delayed
from scipy.sparse.csgraph import dijkstra
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import as_float_matrix, as_float_vector, as_xy
from .dataset import ColumnMeta, FeatureTable, compute_psmp, log_transform
from .exceptions import DataError, DegenerateDataWarning, SchemaError, SingularSystemError

EARTH_RADIUS_M = 6_371_000.0


# ---------------------------------------------------------------------------
# projection

def project(lonlat, origin=None):
    """Local equirectangular projection of (lon, lat) degrees to meters.

    x = R·Δlon·cos(lat0), y = R·Δlat with angles in radians; ``origin``
    defaults to the centroid of the input points.
    """
    pts = as_xy(lonlat, "lonlat")
    if origin is None:
        origin = pts.mean(axis=0)
    lon0, lat0 = float(origin[0]), float(origin[1])
    x = EARTH_RADIUS_M * np.radians(pts[:, 0] - lon0) * math.cos(math.radians(lat0))
    y = EARTH_RADIUS_M * np.radians(pts[:, 1] - lat0)
    return np.column_stack([x, y])


def unproject(xy, origin):
    xy = as_xy(xy)
    lon0, lat0 = float(origin[0]), float(origin[1])
    lon = lon0 + np.degrees(xy[:, 0] / (EARTH_RADIUS_M * math.cos(math.radians(lat0))))
    lat = lat0 + np.degrees(xy[:, 1] / EARTH_RADIUS_M)
    return np.column_stack([lon, lat])


# ---------------------------------------------------------------------------
# road graph

@dataclass(frozen=True, eq=False)
class RoadGraph:
    """Directed road graph; nodes map id -> (lon, lat), edges are (from, to, length_m)."""

    nodes: dict
    edges: tuple = field(default_factory=tuple)

    def __post_init__(self):
        edges = tuple((str(a), str(b), float(w)) for a, b, w in self.edges)
        nodes = {str(k): (float(v[0]), float(v[1])) for k, v in self.nodes.items()}
        for a, b, w in edges:
            if a not in nodes or b not in nodes:
                raise DataError(f"edge {a}->{b} references an unknown node")
            if not w > 0:
                raise DataError(f"edge {a}->{b} has non-positive length {w}")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "_index", {k: i for i, k in enumerate(nodes)})

    @property
    def node_ids(self):
        return list(self.nodes)

    def index(self, node_id):
        try:
            return self._index[str(node_id)]
        except KeyError:
            raise DataError(f"unknown node id {node_id!r}") from None

    def lonlat(self):
        return np.array(list(self.nodes.values()), dtype=float).reshape(-1, 2)

    def adjacency(self):
        """CSR matrix of edge lengths; parallel edges keep the shortest."""
        n = len(self.nodes)
        best = {}
        for a, b, w in self.edges:
            key = (self._index[a], self._index[b])
            if key[0] == key[1]:
                continue
            if w < best.get(key, math.inf):
                best[key] = w
        if not best:
            return scipy.sparse.csr_matrix((n, n))
        (rows, cols), vals = zip(*best.keys()), list(best.values())
        return scipy.sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))

    def with_edge(self, a, b, length):
        return RoadGraph(self.nodes, self.edges + ((a, b, length),))

    @classmethod
    def from_csv(cls, nodes_csv, edges_csv):
        """Nodes CSV: id, lon, lat. Edges CSV: from_id, to_id, length_m, oneway.

        ``oneway`` false/0/no adds the reverse edge too.
        """
        def rows(data, required):
            text = data.decode("utf-8-sig") if isinstance(data, bytes) else data
            r = csv.DictReader(io.StringIO(text))
            if r.fieldnames is None or not set(required) <= set(r.fieldnames):
                raise SchemaError(f"CSV header must contain {required}, got {r.fieldnames}")
            return list(r)

        nodes = {row["id"]: (float(row["lon"]), float(row["lat"]))
                 for row in rows(nodes_csv, ["id", "lon", "lat"])}
        edges = []
        for row in rows(edges_csv, ["from_id", "to_id", "length_m"]):
            w = float(row["length_m"])
            edges.append((row["from_id"], row["to_id"], w))
            oneway = str(row.get("oneway", "1")).strip().lower()
            if oneway in ("0", "false", "no", "f", "n"):
                edges.append((row["to_id"], row["from_id"], w))
        return cls(nodes, tuple(edges))


def road_distance(graph, from_node, to_node):
    """Shortest directed path length in meters, or None when unreachable."""
    src, dst = graph.index(from_node), graph.index(to_node)
    if src == dst:
        return 0.0
    out = {}
    for a, b, w in graph.edges:
        out.setdefault(graph.index(a), []).append((graph.index(b), w))
    dist = {src: 0.0}
    heap = [(0.0, src)]
    done = set()
    while heap:
        d, u = heapq.heappop(heap)
        if u in done:
            continue
        if u == dst:
            return d
        done.add(u)
        for v, w in out.get(u, ()):
            nd = d + w
            if nd < dist.get(v, math.inf):
                dist[v] = nd
                heapq.heappush(heap, (nd, v))
    return None


def _harmonic_block(rev, targets):
    d = dijkstra(rev, directed=True, indices=targets)
    with np.errstate(divide="ignore"):
        inv = np.where(np.isfinite(d) & (d > 0), 1.0 / d, 0.0)
    return inv.sum(axis=1)


def harmonic_centrality(graph, n_jobs=1, block=256):
    """C(u) = Σ_{v≠u} 1/d(v, u) over reachable v.

    Distances *towards* u are single-source distances from u on the
    edge-reversed graph. Unreachable pairs contribute 0.
    """
    n = len(graph.nodes)
    if n == 0:
        raise DataError("graph has no nodes")
    rev = graph.adjacency().T.tocsr()
    chunks = [np.arange(s, min(n, s + block)) for s in range(0, n, block)]
    parts = Parallel(n_jobs=n_jobs)(delayed(_harmonic_block)(rev, c) for c in chunks)
    values = np.concatenate(parts)
    return dict(zip(graph.node_ids, values.tolist()))


# ---------------------------------------------------------------------------
# interpolation surface

class RBFSurface(RegressorMixin, BaseEstimator):
    """Exact interpolant Z(x0) = Σ c_i B(|x0 − x_i|) with the linear kernel B(h) = −h.

    The weights solve the dense system at the sites. A diagonal jitter of
    1e-10 · mean|A| is added only if the plain solve fails, growing ×10 up to
    1e-4.
    """

    def __init__(self, rtol=1e-8):
        self.rtol = rtol

    def fit(self, X, y):
        sites = as_xy(X, "sites")
        v = as_float_vector(y, "values")
        if sites.shape[0] != v.shape[0]:
            raise DataError("sites and values differ in length")
        if np.unique(sites, axis=0).shape[0] != sites.shape[0]:
            raise DataError("RBF sites must be pairwise distinct")
        A = -np.sqrt(((sites[:, None, :] - sites[None, :, :]) ** 2).sum(-1))
        scale = float(np.mean(np.abs(A))) if A.size > 1 else 1.0
        jitters = [0.0] + [10.0 ** e for e in range(-10, -3)]
        norm_v = max(float(np.linalg.norm(v)), 1e-300)
        coef = None
        for j in jitters:
            M = A + j * scale * np.eye(A.shape[0]) if j else A
            try:
                c = scipy.linalg.solve(M, v, assume_a="sym", check_finite=True)
            except (np.linalg.LinAlgError, scipy.linalg.LinAlgWarning, ValueError):
                continue
            if np.all(np.isfinite(c)) and np.linalg.norm(M @ c - v) <= self.rtol * norm_v:
                coef = c
                self.jitter_ = j * scale
                break
        if coef is None:
            cond = np.linalg.cond(A) if A.shape[0] > 1 else 1.0
            raise SingularSystemError(f"RBF system could not be solved (condition estimate {cond:.3g})")
        self.sites_ = sites
        self.coef_ = coef
        return self

    def predict(self, X, chunk=2048):
        check_is_fitted(self, "coef_")
        q = as_xy(X, "query")
        out = np.empty(q.shape[0])
        for s in range(0, q.shape[0], chunk):
            h = np.sqrt(((q[s:s + chunk, None, :] - self.sites_[None, :, :]) ** 2).sum(-1))
            out[s:s + chunk] = -(h @ self.coef_)
        return out


def rbf_fit(sites_xy, values):
    return RBFSurface().fit(sites_xy, values)


def rbf_eval(surface, query_xy):
    return surface.predict(query_xy)


def development_of_road_network(graph, object_xy, origin, max_nodes=5000, subsample=2000,
                                seed=0, n_jobs=1):
    """Road-network development factor at object locations.

    Harmonic centrality on the graph nodes, interpolated to the objects with
    the linear-kernel RBF surface. Graphs above ``max_nodes`` are fitted on a
    uniform random subsample of ``subsample`` nodes.
    """
    cent = harmonic_centrality(graph, n_jobs=n_jobs)
    xy_nodes = project(graph.lonlat(), origin)
    vals = np.array([cent[k] for k in graph.node_ids])
    if len(vals) > max_nodes:
        keep = np.sort(np.random.default_rng(seed).choice(len(vals), size=subsample, replace=False))
        xy_nodes, vals = xy_nodes[keep], vals[keep]
    xy_nodes, uniq = np.unique(xy_nodes, axis=0, return_index=True)
    vals = vals[uniq]
    return RBFSurface().fit(xy_nodes, vals).predict(as_xy(object_xy))


# ---------------------------------------------------------------------------
# aggregation, ratios, counts

class FirstComponentPCA(TransformerMixin, BaseEstimator):
    """Scores on the leading eigenvector of the correlation matrix.

    The loading vector is oriented so its entries sum to a non-negative
    value; ``transform`` returns ``X @ loadings_`` on already standardized
    columns.
    """

    def fit(self, X, y=None):
        X = as_float_matrix(X, min_rows=2)
        if X.shape[1] < 2:
            raise DataError("PCA aggregation needs at least two columns")
        C = np.corrcoef(X, rowvar=False)
        evals, evecs = np.linalg.eigh(C)
        v = evecs[:, -1]
        if v.sum() < 0:
            v = -v
        self.loadings_ = v
        self.eigenvalue_ = float(evals[-1])
        self.explained_variance_ratio_ = float(evals[-1] / evals.sum())
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "loadings_")
        return as_float_matrix(X) @ self.loadings_


def pca_first_component(matrix):
    """Returns (scores, loadings, explained_variance_ratio)."""
    pca = FirstComponentPCA().fit(matrix)
    return pca.transform(matrix), pca.loadings_, pca.explained_variance_ratio_


def ratio_feature(numerator, denominator):
    num = as_float_vector(numerator, "numerator")
    den = as_float_vector(denominator, "denominator")
    if num.shape != den.shape:
        raise DataError("numerator and denominator differ in length")
    bad = np.flatnonzero(~(den > 0))
    if bad.size:
        raise DataError(f"denominator must be positive; index {int(bad[0])} is {den[bad[0]]}")
    return num / den


def count_within_radius(object_xy, poi_xy, radius_m):
    """Number of POIs within ``radius_m`` (inclusive) of each object."""
    if not radius_m > 0:
        raise DataError("radius must be positive")
    obj = as_xy(object_xy, "objects")
    poi = np.asarray(poi_xy, dtype=float).reshape(-1, 2)
    if poi.shape[0] == 0:
        return np.zeros(obj.shape[0], dtype=np.int64)
    r = radius_m * (1.0 + 1e-12)
    return np.asarray(cKDTree(poi).query_ball_point(obj, r, return_length=True), dtype=np.int64)


def distance_to_nearest(object_xy, poi_xy):
    poi = np.asarray(poi_xy, dtype=float).reshape(-1, 2)
    if poi.shape[0] == 0:
        raise DataError("no points to measure distance to")
    d, _ = cKDTree(poi).query(as_xy(object_xy, "objects"))
    return d


# ---------------------------------------------------------------------------
# POI layers and the feature-table builder

def parse_poi(data):
    """POI layer from CSV (lon, lat, category) or a GeoJSON FeatureCollection.

    Returns category -> (n, 2) lon/lat array.
    """
    text = data.decode("utf-8-sig") if isinstance(data, bytes) else data
    out = {}
    if text.lstrip().startswith("{"):
        doc = json.loads(text)
        for feat in doc.get("features", []):
            geom = feat.get("geometry") or {}
            if geom.get("type") != "Point":
                continue
            cat = str((feat.get("properties") or {}).get("category", ""))
            out.setdefault(cat, []).append(geom["coordinates"][:2])
    else:
        r = csv.DictReader(io.StringIO(text))
        if r.fieldnames is None or not {"lon", "lat", "category"} <= set(r.fieldnames):
            raise SchemaError(f"POI CSV needs lon, lat, category columns, got {r.fieldnames}")
        for row in r:
            out.setdefault(row["category"], []).append((float(row["lon"]), float(row["lat"])))
    return {k: np.asarray(v, dtype=float).reshape(-1, 2) for k, v in out.items()}


FEATURE_KINDS = ("area", "attribute", "one_hot", "distance_to_point", "distance_to_nearest",
                 "road_distance_to", "count_within", "road_network_development", "pca", "ratio")


def _nearest_node(graph, origin, xy):
    nodes_xy = project(graph.lonlat(), origin)
    _, idx = cKDTree(nodes_xy).query(as_xy(xy))
    ids = graph.node_ids
    return [ids[i] for i in np.atleast_1d(idx)]


def _road_distances_to(graph, origin, object_xy, target_lonlat):
    target = _nearest_node(graph, origin, project(np.asarray([target_lonlat]), origin))[0]
    starts = _nearest_node(graph, origin, object_xy)
    adj = graph.adjacency()
    # distances from every node to the target = distances from target on the reversed graph
    d = dijkstra(adj.T.tocsr(), directed=True, indices=graph.index(target))
    out = np.array([d[graph.index(s)] for s in starts])
    if not np.all(np.isfinite(out)):
        finite = out[np.isfinite(out)]
        fill = float(finite.max()) if finite.size else 0.0
        warnings.warn(f"{int(np.sum(~np.isfinite(out)))} objects cannot reach the target by road; "
                      f"using the largest finite distance", DegenerateDataWarning, stacklevel=3)
        out = np.where(np.isfinite(out), out, fill)
    return out


def build_feature_table(records, definitions, origin=None, layers=None, graph=None,
                        target="psmp", seed=0, n_jobs=1, road_max_nodes=5000, road_subsample=2000):
    """Evaluate declarative feature definitions over records.

    Each definition is a dict with ``name``, ``kind`` (one of
    :data:`FEATURE_KINDS`), optional ``expected_sign`` and ``include`` (False
    keeps the value available to later definitions but out of the table),
    plus kind-specific keys:

    - ``attribute``: ``attribute``
    - ``one_hot``: ``attribute``, ``value``
    - ``distance_to_point``: ``lon``, ``lat``
    - ``distance_to_nearest``: ``layer`` category
    - ``road_distance_to``: ``lon``, ``lat`` (objects and target snap to nearest nodes)
    - ``count_within``: ``layer``, ``radius_m``
    - ``pca``: ``inputs`` (names; z-scored before aggregation)
    - ``ratio``: ``numerator``, ``denominator``

    ``target`` is ``"psmp"`` or ``"log_psmp"``.
    """
    layers = layers or {}
    lonlat = np.array([(r.lon, r.lat) for r in records], dtype=float).reshape(-1, 2)
    if origin is None:
        origin = lonlat.mean(axis=0) if len(records) else np.zeros(2)
    xy = project(lonlat, origin) if len(records) else np.zeros((0, 2))
    values = {}
    metas = []
    for d in definitions:
        name, kind = d["name"], d["kind"]
        if kind not in FEATURE_KINDS:
            raise SchemaError(f"feature {name!r}: unknown kind {kind!r}")
        col_kind = "continuous"
        if kind == "area":
            v = np.array([r.area for r in records], dtype=float)
        elif kind == "attribute":
            try:
                v = np.array([float(r.attributes[d["attribute"]]) for r in records], dtype=float)
            except KeyError:
                raise DataError(f"feature {name!r}: some record lacks attribute {d['attribute']!r}") from None
        elif kind == "one_hot":
            v = np.array([1.0 if str(r.attributes.get(d["attribute"])) == str(d["value"]) else 0.0
                          for r in records])
            col_kind = "binary"
        elif kind == "distance_to_point":
            p = project(np.array([[d["lon"], d["lat"]]]), origin)[0]
            v = np.sqrt(((xy - p) ** 2).sum(1))
        elif kind == "distance_to_nearest":
            v = distance_to_nearest(xy, project(_layer(layers, d["layer"]), origin))
        elif kind == "road_distance_to":
            if graph is None:
                raise DataError(f"feature {name!r} needs a road graph")
            v = _road_distances_to(graph, origin, xy, (d["lon"], d["lat"]))
        elif kind == "count_within":
            pts = _layer(layers, d["layer"])
            v = count_within_radius(xy, project(pts, origin) if len(pts) else pts,
                                    float(d["radius_m"])).astype(float)
        elif kind == "road_network_development":
            if graph is None:
                raise DataError(f"feature {name!r} needs a road graph")
            v = development_of_road_network(graph, xy, origin, max_nodes=road_max_nodes,
                                            subsample=road_subsample, seed=seed, n_jobs=n_jobs)
        elif kind == "pca":
            M = np.column_stack([values[k] for k in d["inputs"]])
            sd = M.std(axis=0)
            if np.any(sd == 0):
                raise DataError(f"feature {name!r}: a PCA input has zero variance")
            v, _, _ = pca_first_component((M - M.mean(0)) / sd)
        else:
            v = ratio_feature(values[d["numerator"]], values[d["denominator"]])
        values[name] = np.asarray(v, dtype=float)
        if d.get("include", True):
            metas.append(ColumnMeta(name=name, kind=d.get("column_kind", col_kind),
                                    expected_sign=d.get("expected_sign", "unconstrained")))
    psmp = np.array([compute_psmp(r) for r in records], dtype=float)
    y = log_transform(psmp) if target == "log_psmp" else psmp
    M = np.column_stack([values[m.name] for m in metas]) if metas else np.zeros((len(records), 0))
    return FeatureTable(matrix=M.reshape(len(records), len(metas)), target=y, columns=tuple(metas),
                        ids=[r.id for r in records], coords=xy, target_kind=target)


def _layer(layers, key):
    if key not in layers:
        raise DataError(f"POI layer {key!r} not provided (have {sorted(layers)})")
    return np.asarray(layers[key], dtype=float).reshape(-1, 2)
