"""Synthetic market data with planted structure.

Land parcels get ln(PSMP) = trend on table features + Gaussian random
field + white noise. Flats get buildings grouped in districts with a step
premium for new buildings in central districts, plus fictitious deals
priced at a fraction of the true value. Every planted label and parameter
is written to the truth document.
"""

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import cho_factor

from ._validation import stream_rng
from .dataset import PropertyRecord, records_to_csv
from .exceptions import DataError
from .features import build_feature_table, unproject

# streams keyed under the master seed
_S_LOC, _S_ATTR, _S_FIELD, _S_NOISE, _S_OUT, _S_ROAD, _S_POI = range(7)

LAND_FEATURES = [
    {"name": "area", "kind": "area", "expected_sign": "negative"},
    {"name": "dist_center", "kind": "distance_to_point", "lon": 0.0, "lat": 0.0, "expected_sign": "negative"},
    {"name": "dist_coast", "kind": "distance_to_nearest", "layer": "coast", "expected_sign": "negative"},
    {"name": "shops_2km", "kind": "count_within", "layer": "shop", "radius_m": 2000.0,
     "expected_sign": "positive"},
    {"name": "utilities", "kind": "one_hot", "attribute": "utilities", "value": "yes",
     "expected_sign": "positive"},
]
LAND_TREND = {"intercept": 8.0, "area": -4e-5, "dist_center": -3e-5, "dist_coast": -2e-5,
              "shops_2km": 0.01, "utilities": 0.15}

FLAT_FEATURES = [
    {"name": "area", "kind": "area", "expected_sign": "negative"},
    {"name": "storey", "kind": "attribute", "attribute": "storey", "expected_sign": "unconstrained"},
    {"name": "storeys_total", "kind": "attribute", "attribute": "storeys_total",
     "expected_sign": "unconstrained"},
    {"name": "year_built", "kind": "attribute", "attribute": "year_built", "expected_sign": "positive"},
    {"name": "dist_center", "kind": "distance_to_point", "lon": 0.0, "lat": 0.0, "expected_sign": "negative"},
    {"name": "wall_brick", "kind": "one_hot", "attribute": "wall_material", "value": "brick",
     "expected_sign": "unconstrained"},
    {"name": "wall_monolith", "kind": "one_hot", "attribute": "wall_material", "value": "monolith",
     "expected_sign": "unconstrained"},
]
# ln PSMP coefficients for flats; the step premium applies when
# dist_center <= step_dist and year_built > step_year
FLAT_TREND = {"intercept": float(np.log(210000.0)), "area": -0.004, "storey": 0.002,
              "dist_center": -2.5e-5, "year_built": 0.002, "wall_brick": 0.03, "wall_monolith": 0.05}
FLAT_CENTERING = {"area": 60.0, "storey": 5.0, "year_built": 1990.0}


@dataclass
class SynthSpec:
    """Parameters of a synthetic market sample.

    ``extent_m`` is the side of the square study area centred on
    (``origin_lon``, ``origin_lat``). Variogram parameters describe the
    Gaussian field added to ln(PSMP) (land only). ``outlier_factor``
    multiplies the price of planted outliers. ``noise_sd`` is the white-noise
    sd of ln(PSMP) (default 0.15 for land, 0.02 for flats).
    """

    segment: str = "land_parcel"
    n: int = 3000
    extent_m: float = 30000.0
    origin_lon: float = 131.9
    origin_lat: float = 43.1
    trend: dict = None
    field_partial_sill: float = 0.09
    field_range: float = 2000.0
    noise_sd: float = None
    outlier_fraction: float = 0.0
    outlier_factor: float = 0.25
    # flats
    n_districts: int = 10
    district_sd_m: float = 500.0
    flats_per_building: int = 25
    step_dist: float = 4000.0
    step_year: float = 2005.0
    step_premium: float = 0.4
    building_sd: float = 0.01
    # optional road grid for network features
    road_grid: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.segment not in ("land_parcel", "flat"):
            raise DataError(f"unknown segment {self.segment!r}")
        if self.noise_sd is None:
            self.noise_sd = 0.15 if self.segment == "land_parcel" else 0.02
        if self.n < 1:
            raise DataError("n must be positive")
        if not 0 <= self.outlier_fraction < 1:
            raise DataError("outlier_fraction must lie in [0, 1)")

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_dict(self):
        return asdict(self)


@dataclass
class SynthBundle:
    """Generated files (name -> text) and the planted truth."""

    files: dict
    truth: dict
    records: list
    definitions: list
    layers: dict
    graph: object = None

    def write(self, out_dir):
        import pathlib
        out = pathlib.Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, text in self.files.items():
            (out / name).write_text(text)
        return sorted(self.files)


# ---------------------------------------------------------------------------
# Gaussian random fields

def exponential_covariance(h, partial_sill, range_param):
    return partial_sill * np.exp(-np.asarray(h) / range_param)


def gaussian_field(xy, partial_sill, range_param, rng):
    """Zero-mean field with exponential covariance at scattered points (Cholesky)."""
    xy = np.asarray(xy, dtype=float)
    if partial_sill == 0 or xy.shape[0] == 0:
        return np.zeros(xy.shape[0])
    d = np.sqrt(((xy[:, None, :] - xy[None, :, :]) ** 2).sum(-1))
    C = exponential_covariance(d, partial_sill, range_param)
    C[np.diag_indices_from(C)] += 1e-10 * partial_sill
    L, _ = cho_factor(C, lower=True, overwrite_a=True)
    L = np.tril(L)
    return L @ rng.standard_normal(xy.shape[0])


def grid_field(n_side, spacing, partial_sill, range_param, rng):
    """Field on an ``n_side`` square grid via circulant embedding.

    Returns (xy, values). The torus is twice the grid size; negative
    eigenvalues of the embedding (rare for the exponential model) are
    clipped to zero.
    """
    m = 2 * n_side
    idx = np.arange(m)
    lag = np.minimum(idx, m - idx) * spacing
    h = np.sqrt(lag[:, None] ** 2 + lag[None, :] ** 2)
    base = exponential_covariance(h, partial_sill, range_param)
    lam = np.fft.fft2(base).real
    lam = np.clip(lam, 0, None)
    z = rng.standard_normal((m, m)) + 1j * rng.standard_normal((m, m))
    f = np.fft.fft2(np.sqrt(lam / (m * m)) * z)
    values = f.real[:n_side, :n_side].ravel()
    g = np.arange(n_side) * spacing
    gx, gy = np.meshgrid(g, g, indexing="ij")
    return np.column_stack([gx.ravel(), gy.ravel()]), values


# ---------------------------------------------------------------------------
# helpers

def _road_grid(spec, rng, origin):
    from .features import RoadGraph
    k = spec.road_grid
    g = (np.arange(k) - (k - 1) / 2) * spec.extent_m / max(k - 1, 1)
    jitter = rng.uniform(-0.1, 0.1, size=(k, k, 2)) * spec.extent_m / max(k - 1, 1)
    nodes = []
    for i in range(k):
        for j in range(k):
            lon, lat = unproject(np.array([[g[i] + jitter[i, j, 0], g[j] + jitter[i, j, 1]]]), origin)[0]
            nodes.append((f"n{i}_{j}", float(lon), float(lat)))
    pos = {nid: np.array([g[int(nid[1:].split("_")[0])], g[int(nid.split("_")[1])]]) for nid, _, _ in nodes}
    edges = []
    for i in range(k):
        for j in range(k):
            for di, dj in ((1, 0), (0, 1)):
                if i + di < k and j + dj < k:
                    a, b = f"n{i}_{j}", f"n{i + di}_{j + dj}"
                    length = float(np.linalg.norm(pos[a] - pos[b]) * rng.uniform(1.0, 1.3))
                    edges.append((a, b, length, bool(rng.random() < 0.1)))
    nodes_csv = "id,lon,lat\n" + "".join(f"{n},{lo!r},{la!r}\n" for n, lo, la in nodes)
    edges_csv = "from_id,to_id,length_m,oneway\n" + "".join(
        f"{a},{b},{length!r},{int(o)}\n" for a, b, length, o in edges)
    return RoadGraph.from_csv(nodes_csv, edges_csv), nodes_csv, edges_csv


def _poi_csv(layers):
    lines = ["lon,lat,category"]
    for cat in sorted(layers):
        for lon, lat in layers[cat]:
            lines.append(f"{float(lon)!r},{float(lat)!r},{cat}")
    return "\n".join(lines) + "\n"


def _definitions(base, origin):
    out = []
    for d in base:
        d = dict(d)
        if d["kind"] == "distance_to_point":
            d["lon"], d["lat"] = float(origin[0]), float(origin[1])
        out.append(d)
    return out


def _plant_outliers(n, spec, rng, eligible=None):
    pool = np.arange(n) if eligible is None else np.flatnonzero(eligible)
    k = int(round(spec.outlier_fraction * n))
    k = min(k, pool.size)
    return np.sort(rng.choice(pool, size=k, replace=False)) if k else np.zeros(0, dtype=int)


# ---------------------------------------------------------------------------
# generators

def _land(spec, seed):
    origin = np.array([spec.origin_lon, spec.origin_lat])
    rng_loc = stream_rng(seed, _S_LOC)
    half = spec.extent_m / 2
    xy = rng_loc.uniform(-half, half, size=(spec.n, 2))
    lonlat = unproject(xy, origin)
    rng_poi = stream_rng(seed, _S_POI)
    coast_x = np.linspace(-half, half, 60)
    coast = unproject(np.column_stack([coast_x, -half + 0.15 * spec.extent_m
                                       + 0.05 * spec.extent_m * np.sin(coast_x / spec.extent_m * 6)]), origin)
    shops = unproject(rng_poi.normal(0, spec.extent_m / 5, size=(max(spec.n // 15, 5), 2)), origin)
    layers = {"coast": coast, "shop": shops}

    rng_attr = stream_rng(seed, _S_ATTR)
    area = np.round(rng_attr.uniform(500, 5000, size=spec.n), 1)
    utilities = rng_attr.random(spec.n) < 0.5
    source = np.where(rng_attr.random(spec.n) < 0.5, "offer", "deal")
    graph, files_road = None, {}
    definitions = _definitions(LAND_FEATURES, origin)
    if spec.road_grid:
        graph, nodes_csv, edges_csv = _road_grid(spec, stream_rng(seed, _S_ROAD), origin)
        files_road = {"road_nodes.csv": nodes_csv, "road_edges.csv": edges_csv}
        definitions.append({"name": "road_dev", "kind": "road_network_development",
                            "expected_sign": "positive"})

    # provisional records (price 1) to evaluate the features exactly as the pipeline will
    recs = [PropertyRecord(id=f"L{i:05d}", segment="land_parcel", source=str(source[i]),
                           lon=float(lonlat[i, 0]), lat=float(lonlat[i, 1]), area=float(area[i]),
                           total_price=1.0, attributes={"utilities": "yes" if utilities[i] else "no"})
            for i in range(spec.n)]
    table = build_feature_table(recs, definitions, origin=origin, layers=layers, graph=graph)
    trend_coef = dict(LAND_TREND, **(spec.trend or {}))
    if graph is not None:
        trend_coef.setdefault("road_dev", 0.0)
    trend = np.full(spec.n, trend_coef["intercept"])
    for j, name in enumerate(table.names):
        trend += trend_coef.get(name, 0.0) * table.matrix[:, j]
    fld = gaussian_field(table.coords, spec.field_partial_sill, spec.field_range, stream_rng(seed, _S_FIELD))
    noise = stream_rng(seed, _S_NOISE).normal(0, spec.noise_sd, size=spec.n) if spec.noise_sd else np.zeros(spec.n)
    ln_psmp = trend + fld + noise
    price = np.exp(ln_psmp) * area
    out_idx = _plant_outliers(spec.n, spec, stream_rng(seed, _S_OUT))
    price[out_idx] *= spec.outlier_factor
    records = [PropertyRecord(id=r.id, segment=r.segment, source=r.source, lon=r.lon, lat=r.lat,
                              area=r.area, total_price=float(price[i]), attributes=r.attributes)
               for i, r in enumerate(recs)]
    truth = {"segment": "land_parcel", "seed": seed, "spec": spec.to_dict(), "trend": trend_coef,
             "outlier_ids": [records[i].id for i in out_idx],
             "variogram": {"nugget": spec.noise_sd ** 2, "partial_sill": spec.field_partial_sill,
                           "range": spec.field_range},
             "field": {r.id: float(v) for r, v in zip(records, fld)}}
    files = {"records.csv": records_to_csv(records, ["utilities"]), "poi.csv": _poi_csv(layers)}
    files.update(files_road)
    return records, definitions, layers, graph, truth, files


def flat_ln_psmp(area, storey, year, dist, wall, trend=None, step_dist=4000.0, step_year=2005.0,
                 step_premium=0.4):
    """Noise-free ln PSMP of the flats generator."""
    t = dict(FLAT_TREND, **(trend or {}))
    c = FLAT_CENTERING
    wall = np.asarray(wall)
    step = (np.asarray(dist) <= step_dist) & (np.asarray(year) > step_year)
    return (t["intercept"] + t["area"] * (np.asarray(area) - c["area"])
            + t["storey"] * (np.asarray(storey) - c["storey"])
            + t["year_built"] * (np.asarray(year) - c["year_built"])
            + t["dist_center"] * np.asarray(dist)
            + t["wall_brick"] * (wall == "brick") + t["wall_monolith"] * (wall == "monolith")
            + step_premium * step)


def _flats(spec, seed):
    origin = np.array([spec.origin_lon, spec.origin_lat])
    rng = stream_rng(seed, _S_LOC)
    # district centres alternate between a central ring and the periphery
    k = spec.n_districts
    central = np.arange(k) % 2 == 0
    radius = np.where(central, rng.uniform(1000, 0.6 * spec.step_dist, k),
                      rng.uniform(spec.step_dist + 1500, spec.step_dist + 7000, k))
    angle = rng.uniform(0, 2 * np.pi, k)
    centres = np.column_stack([radius * np.cos(angle), radius * np.sin(angle)])

    n_build = max(int(np.ceil(spec.n / spec.flats_per_building)), 1)
    ra = stream_rng(seed, _S_ATTR)
    b_district = ra.integers(0, k, n_build)
    b_xy = centres[b_district] + ra.normal(0, spec.district_sd_m, size=(n_build, 2))
    new = ra.random(n_build) < 0.5
    b_year = np.where(new, ra.integers(2008, 2023, n_build), ra.integers(1960, 1991, n_build))
    b_storeys = np.where(new, ra.integers(10, 26, n_build), ra.integers(4, 10, n_build))
    b_wall = np.where(new, np.where(ra.random(n_build) < 0.7, "monolith", "brick"),
                      np.where(ra.random(n_build) < 0.7, "panel", "brick"))
    b_effect = ra.normal(0, spec.building_sd, n_build)

    b_of = np.repeat(np.arange(n_build), spec.flats_per_building)[:spec.n]
    xy = b_xy[b_of]
    lonlat = unproject(xy, origin)
    area = np.round(ra.uniform(20, 120, spec.n), 1)
    storey = np.array([ra.integers(1, b_storeys[b] + 1) for b in b_of])
    source = np.where(ra.random(spec.n) < 0.5, "offer", "deal")
    dist = np.sqrt((xy ** 2).sum(1))
    ln_true = flat_ln_psmp(area, storey, b_year[b_of], dist, b_wall[b_of], spec.trend,
                           spec.step_dist, spec.step_year, spec.step_premium) + b_effect[b_of]
    noise = stream_rng(seed, _S_NOISE).normal(0, spec.noise_sd, spec.n) if spec.noise_sd else 0.0
    psmp = np.exp(ln_true + noise)
    price = np.round(psmp * area, 0)
    # fictitious deals: registered at a fraction of the market price
    out_idx = _plant_outliers(spec.n, spec, stream_rng(seed, _S_OUT), eligible=source == "deal")
    price[out_idx] = np.round(price[out_idx] * spec.outlier_factor, 0)
    records = [PropertyRecord(
        id=f"F{i:05d}", segment="flat", source=str(source[i]), lon=float(lonlat[i, 0]),
        lat=float(lonlat[i, 1]), area=float(area[i]), total_price=float(price[i]),
        attributes={"storey": float(storey[i]), "storeys_total": float(b_storeys[b_of[i]]),
                    "year_built": float(b_year[b_of[i]]), "wall_material": str(b_wall[b_of[i]]),
                    "building": f"B{b_of[i]:04d}"})
        for i in range(spec.n)]
    step = (dist <= spec.step_dist) & (b_year[b_of] > spec.step_year)
    definitions = _definitions(FLAT_FEATURES, origin)
    truth = {"segment": "flat", "seed": seed, "spec": spec.to_dict(),
             "trend": dict(FLAT_TREND, **(spec.trend or {})), "centering": FLAT_CENTERING,
             "step": {"dist_center_max": spec.step_dist, "year_built_min_exclusive": spec.step_year,
                      "premium_ln": spec.step_premium, "n_flats": int(step.sum())},
             "outlier_ids": [records[i].id for i in out_idx]}
    attrs = ["building", "storey", "storeys_total", "wall_material", "year_built"]
    files = {"records.csv": records_to_csv(records, attrs)}
    return records, definitions, {}, None, truth, files


def synth_generate(spec, seed=0):
    """Generate a synthetic sample; returns a :class:`SynthBundle`.

    Files: ``records.csv``, ``schema.json``, ``features.json``,
    ``truth.json`` and, when used, ``poi.csv`` and the road-graph CSVs.
    """
    if isinstance(spec, dict):
        spec = SynthSpec.from_dict(spec)
    gen = _land if spec.segment == "land_parcel" else _flats
    records, definitions, layers, graph, truth, files = gen(spec, int(seed))
    attrs = sorted({a for r in records for a in r.attributes})
    numeric = sorted({a for r in records for a, v in r.attributes.items() if isinstance(v, float)})
    files["schema.json"] = json.dumps({"attributes": attrs, "numeric_attributes": numeric}, indent=1,
                                      sort_keys=True)
    files["features.json"] = json.dumps(definitions, indent=1, sort_keys=True)
    files["truth.json"] = json.dumps(truth, indent=1, sort_keys=True)
    return SynthBundle(files=files, truth=truth, records=records, definitions=definitions,
                       layers=layers, graph=graph)
