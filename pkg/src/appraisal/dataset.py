"""Record ingest, the per-square-meter price target, scaling and splitting."""

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import as_float_matrix
from .exceptions import DataError, SchemaError

SEGMENTS = ("land_parcel", "flat")
SOURCES = ("offer", "deal")
CORE_FIELDS = ("id", "segment", "source", "lon", "lat", "area", "total_price")

KINDS = ("continuous", "binary")
SIGNS = ("positive", "negative", "unconstrained")


@dataclass(frozen=True)
class PropertyRecord:
    id: str
    segment: str
    source: str
    lon: float
    lat: float
    area: float
    total_price: float
    attributes: dict = field(default_factory=dict, compare=True, hash=False)

    def __post_init__(self):
        if self.segment not in SEGMENTS:
            raise DataError(f"record {self.id}: unknown segment {self.segment!r}")
        if self.source not in SOURCES:
            raise DataError(f"record {self.id}: unknown source {self.source!r}")
        if not (self.area > 0) or not math.isfinite(self.area):
            raise DataError(f"record {self.id}: area must be positive, got {self.area}")
        if not (self.total_price > 0) or not math.isfinite(self.total_price):
            raise DataError(f"record {self.id}: total_price must be positive, got {self.total_price}")
        if not -90.0 <= self.lat <= 90.0:
            raise DataError(f"record {self.id}: latitude {self.lat} out of range")
        if not -180.0 <= self.lon <= 180.0:
            raise DataError(f"record {self.id}: longitude {self.lon} out of range")

    @property
    def psmp(self):
        return compute_psmp(self)


@dataclass(frozen=True)
class Rejection:
    line: int
    reason: str


def compute_psmp(record):
    """Per square meter price: total price divided by area."""
    return record.total_price / record.area


# ---------------------------------------------------------------------------
# schema config and parsing

DEFAULT_SCHEMA = {
    "columns": {f: f for f in CORE_FIELDS},
    "attributes": {},
    "numeric_attributes": [],
    "defaults": {},
}
_SCHEMA_KEYS = set(DEFAULT_SCHEMA)


def load_schema(schema_config):
    """Normalize a schema config (dict, JSON string/bytes or None).

    Keys: ``columns`` maps each core field to a CSV column (or GeoJSON
    property) name; ``attributes`` maps attribute names to column names (a
    list means identical names); ``numeric_attributes`` lists attributes
    parsed as floats; ``defaults`` gives fallback values for core fields
    missing from the file (typically ``segment`` or ``source``).
    """
    if schema_config is None:
        schema_config = {}
    if isinstance(schema_config, (str, bytes)):
        try:
            schema_config = json.loads(schema_config)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"schema config is not valid JSON: {exc}") from None
    unknown = set(schema_config) - _SCHEMA_KEYS
    if unknown:
        raise SchemaError(f"unknown schema config keys: {sorted(unknown)}")
    columns = dict(DEFAULT_SCHEMA["columns"])
    columns.update(schema_config.get("columns", {}))
    bad = set(columns) - set(CORE_FIELDS)
    if bad:
        raise SchemaError(f"schema maps unknown core fields: {sorted(bad)}")
    attributes = schema_config.get("attributes", {})
    if isinstance(attributes, list):
        attributes = {a: a for a in attributes}
    defaults = dict(schema_config.get("defaults", {}))
    bad = set(defaults) - {"segment", "source"}
    if bad:
        raise SchemaError(f"defaults allowed only for segment/source, got {sorted(bad)}")
    numeric = list(schema_config.get("numeric_attributes", []))
    missing = set(numeric) - set(attributes)
    if missing:
        raise SchemaError(f"numeric_attributes not declared as attributes: {sorted(missing)}")
    return {"columns": columns, "attributes": dict(attributes),
            "numeric_attributes": numeric, "defaults": defaults}


def _build_record(values, schema):
    """Build a record from a field-name -> raw-value lookup; raises on bad cells."""
    cols = schema["columns"]
    raw = {}
    for f in CORE_FIELDS:
        v = values.get(cols[f])
        if v is None or (isinstance(v, str) and v.strip() == ""):
            if f in schema["defaults"]:
                v = schema["defaults"][f]
            else:
                raise DataError(f"missing value for {f!r} (column {cols[f]!r})")
        raw[f] = v
    num = {}
    for f in ("lon", "lat", "area", "total_price"):
        try:
            num[f] = float(str(raw[f]).replace(" ", ""))
        except ValueError:
            raise DataError(f"cannot parse {f}={raw[f]!r} as a number") from None
    attrs = {}
    for name, col in schema["attributes"].items():
        v = values.get(col)
        if v is None or (isinstance(v, str) and v.strip() == ""):
            continue
        if name in schema["numeric_attributes"]:
            try:
                v = float(v)
            except (TypeError, ValueError):
                raise DataError(f"cannot parse attribute {name}={v!r} as a number") from None
        attrs[name] = v
    return PropertyRecord(id=str(raw["id"]).strip(), segment=str(raw["segment"]).strip(),
                          source=str(raw["source"]).strip(), attributes=attrs, **num)


def parse_records(csv_bytes, schema_config=None):
    """Parse CSV bytes into records.

    Returns ``(records, rejects)``. Every data row either yields a record or a
    :class:`Rejection` carrying its 1-based file line number; nothing is
    dropped silently. A malformed header raises :class:`SchemaError`.
    """
    schema = load_schema(schema_config)
    text = csv_bytes.decode("utf-8-sig") if isinstance(csv_bytes, bytes) else csv_bytes
    reader = csv.reader(io.StringIO(text, newline=""))
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaError("CSV has no header row") from None
    header = [h.strip() for h in header]
    if len(set(header)) != len(header):
        raise SchemaError(f"duplicate column names in header: {header}")
    required = [schema["columns"][f] for f in CORE_FIELDS if f not in schema["defaults"]]
    missing = [c for c in required if c not in header]
    if missing:
        raise SchemaError(f"header lacks required columns {missing}")

    records, rejects = [], []
    seen = set()
    for row in reader:
        line = reader.line_num
        if not row or all(c.strip() == "" for c in row):
            continue
        if len(row) != len(header):
            rejects.append(Rejection(line, f"expected {len(header)} cells, got {len(row)}"))
            continue
        try:
            rec = _build_record(dict(zip(header, row)), schema)
        except DataError as exc:
            rejects.append(Rejection(line, str(exc)))
            continue
        if rec.id in seen:
            rejects.append(Rejection(line, f"duplicate record id {rec.id!r}"))
            continue
        seen.add(rec.id)
        records.append(rec)
    return records, rejects


def parse_geojson(data, schema_config=None):
    """Parse a GeoJSON FeatureCollection of Points; lon/lat come from the geometry.

    Rejections use the 0-based feature index in place of a line number.
    """
    schema = load_schema(schema_config)
    doc = json.loads(data.decode("utf-8") if isinstance(data, bytes) else data)
    if doc.get("type") != "FeatureCollection":
        raise SchemaError("GeoJSON root must be a FeatureCollection")
    records, rejects = [], []
    cols = schema["columns"]
    for i, feat in enumerate(doc.get("features", [])):
        geom = feat.get("geometry") or {}
        if geom.get("type") != "Point":
            rejects.append(Rejection(i, f"geometry type {geom.get('type')!r} is not Point"))
            continue
        props = dict(feat.get("properties") or {})
        lon, lat = geom["coordinates"][:2]
        props[cols["lon"]] = lon
        props[cols["lat"]] = lat
        if cols["id"] not in props and "id" in feat:
            props[cols["id"]] = feat["id"]
        try:
            records.append(_build_record(props, schema))
        except DataError as exc:
            rejects.append(Rejection(i, str(exc)))
    return records, rejects


def records_to_csv(records, attribute_names=None):
    """Serialize records to canonical CSV text (core fields then attributes)."""
    if attribute_names is None:
        attribute_names = sorted({k for r in records for k in r.attributes})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(CORE_FIELDS) + list(attribute_names))
    for r in records:
        w.writerow([r.id, r.segment, r.source, repr(r.lon), repr(r.lat), repr(r.area),
                    repr(r.total_price)]
                   + [_fmt(r.attributes.get(a, "")) for a in attribute_names])
    return buf.getvalue()


def _fmt(v):
    return repr(v) if isinstance(v, float) else str(v)


def log_transform(values):
    """Elementwise natural log; rejects non-positive input with its index."""
    v = np.asarray(values, dtype=float)
    bad = np.flatnonzero(~(v > 0))
    if bad.size:
        raise DataError(f"log_transform needs positive values; index {int(bad[0])} is {v.flat[bad[0]]}")
    return np.log(v)


# ---------------------------------------------------------------------------
# feature tables

@dataclass(frozen=True)
class ColumnMeta:
    name: str
    kind: str = "continuous"
    expected_sign: str = "unconstrained"
    mean: float | None = None
    stddev: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DataError(f"column {self.name}: kind must be one of {KINDS}")
        if self.expected_sign not in SIGNS:
            raise DataError(f"column {self.name}: expected_sign must be one of {SIGNS}")


@dataclass(frozen=True, eq=False)
class FeatureTable:
    """Aligned feature matrix, target vector and per-column metadata.

    ``target_kind`` is ``"log_psmp"`` when the target is ln(PSMP) and
    ``"psmp"`` when it is the raw price per square meter. ``coords`` holds
    projected planar coordinates in meters when the table is spatial.
    """

    matrix: np.ndarray
    target: np.ndarray
    columns: tuple
    ids: tuple = None
    coords: np.ndarray = None
    target_kind: str = "psmp"

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float, copy=True)
        if m.ndim == 1:
            m = m.reshape(-1, 1) if len(self.columns) == 1 else m.reshape(len(m), -1)
        if m.ndim != 2:
            raise DataError("matrix must be 2-dimensional")
        t = np.array(self.target, dtype=float, copy=True).ravel()
        cols = tuple(c if isinstance(c, ColumnMeta) else ColumnMeta(**c) for c in self.columns)
        if m.shape[1] != len(cols):
            raise DataError(f"{len(cols)} column descriptors for {m.shape[1]} matrix columns")
        if m.shape[0] != t.shape[0]:
            raise DataError(f"matrix has {m.shape[0]} rows but target has {t.shape[0]}")
        if not np.all(np.isfinite(m)):
            r, c = np.argwhere(~np.isfinite(m))[0]
            raise DataError(f"missing/non-finite value in column {cols[c].name!r}, row {r}")
        if not np.all(np.isfinite(t)):
            raise DataError("target contains missing/non-finite values")
        for j, c in enumerate(cols):
            if c.kind == "binary" and not np.all((m[:, j] == 0) | (m[:, j] == 1)):
                raise DataError(f"binary column {c.name!r} has values outside {{0, 1}}")
        names = [c.name for c in cols]
        if len(set(names)) != len(names):
            raise DataError(f"duplicate column names: {names}")
        m.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "target", t)
        object.__setattr__(self, "columns", cols)
        if self.ids is not None:
            ids = tuple(str(i) for i in self.ids)
            if len(ids) != m.shape[0]:
                raise DataError("ids length does not match row count")
            object.__setattr__(self, "ids", ids)
        if self.coords is not None:
            xy = np.array(self.coords, dtype=float, copy=True).reshape(-1, 2)
            if xy.shape[0] != m.shape[0]:
                raise DataError("coords length does not match row count")
            xy.setflags(write=False)
            object.__setattr__(self, "coords", xy)

    @property
    def n_rows(self):
        return self.matrix.shape[0]

    @property
    def names(self):
        return [c.name for c in self.columns]

    @property
    def binary_mask(self):
        return np.array([c.kind == "binary" for c in self.columns], dtype=bool)

    def index_of(self, name):
        try:
            return self.names.index(name)
        except ValueError:
            raise DataError(f"no column named {name!r}") from None

    def column(self, name):
        return self.matrix[:, self.index_of(name)]

    def select(self, names):
        idx = [self.index_of(n) for n in names]
        return replace(self, matrix=self.matrix[:, idx], columns=tuple(self.columns[i] for i in idx))

    def take(self, rows):
        rows = np.asarray(rows)
        return replace(
            self,
            matrix=self.matrix[rows],
            target=self.target[rows],
            ids=None if self.ids is None else tuple(self.ids[i] for i in np.arange(self.n_rows)[rows]),
            coords=None if self.coords is None else self.coords[rows],
        )

    def with_target(self, target, target_kind):
        return replace(self, target=target, target_kind=target_kind)

    def psmp(self):
        """Target expressed in RUB per square meter."""
        return np.exp(self.target) if self.target_kind == "log_psmp" else np.asarray(self.target)

    # -- serialization ------------------------------------------------------

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        head = ["id"] + (["x_m", "y_m"] if self.coords is not None else []) + self.names + ["target"]
        w.writerow(head)
        ids = self.ids if self.ids is not None else [str(i) for i in range(self.n_rows)]
        for i in range(self.n_rows):
            row = [ids[i]]
            if self.coords is not None:
                row += [repr(float(v)) for v in self.coords[i]]
            row += [repr(float(v)) for v in self.matrix[i]] + [repr(float(self.target[i]))]
            w.writerow(row)
        return buf.getvalue()

    def metadata(self):
        return {
            "target_kind": self.target_kind,
            "spatial": self.coords is not None,
            "columns": [
                {"name": c.name, "kind": c.kind, "expected_sign": c.expected_sign,
                 "mean": c.mean, "stddev": c.stddev}
                for c in self.columns
            ],
        }

    @classmethod
    def from_csv(cls, csv_text, metadata):
        rows = list(csv.reader(io.StringIO(csv_text)))
        head, body = rows[0], rows[1:]
        cols = tuple(ColumnMeta(**c) for c in metadata["columns"])
        off = 3 if metadata.get("spatial") else 1
        if head[off:off + len(cols)] != [c.name for c in cols]:
            raise SchemaError("feature CSV header does not match its metadata")
        data = np.array([[float(v) for v in r[1:]] for r in body], dtype=float).reshape(len(body), -1)
        coords = data[:, :2] if metadata.get("spatial") else None
        k = off - 1
        return cls(matrix=data[:, k:k + len(cols)], target=data[:, -1], columns=cols,
                   ids=[r[0] for r in body], coords=coords,
                   target_kind=metadata.get("target_kind", "psmp"))


# ---------------------------------------------------------------------------
# scaling

class Scaler(TransformerMixin, BaseEstimator):
    """Z-score scaler that leaves binary (0/1) columns untouched.

    Uses the population standard deviation (ddof = 0).

    Parameters
    ----------
    binary_mask : array-like of bool, optional
        Columns to pass through unchanged. Defaults to no binary columns.
    feature_names : list of str, optional
        Used in error messages.
    """

    def __init__(self, binary_mask=None, feature_names=None):
        self.binary_mask = binary_mask
        self.feature_names = feature_names

    def fit(self, X, y=None):
        X = as_float_matrix(X)
        mask = (np.zeros(X.shape[1], dtype=bool) if self.binary_mask is None
                else np.asarray(self.binary_mask, dtype=bool))
        if mask.shape[0] != X.shape[1]:
            raise DataError("binary_mask length does not match the number of columns")
        mean = X.mean(axis=0)
        scale = X.std(axis=0, ddof=0)
        names = self.feature_names or [f"x{j}" for j in range(X.shape[1])]
        for j in np.flatnonzero(~mask):
            if not scale[j] > 0:
                raise DataError(f"continuous column {names[j]!r} has zero variance")
        mean[mask] = 0.0
        scale[mask] = 1.0
        self.mean_ = mean
        self.scale_ = scale
        self.binary_mask_ = mask
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self)
        X = as_float_matrix(X)
        if X.shape[1] != self.n_features_in_:
            raise DataError(f"expected {self.n_features_in_} columns, got {X.shape[1]}")
        return (X - self.mean_) / self.scale_

    def inverse_transform(self, X):
        check_is_fitted(self)
        X = as_float_matrix(X)
        return X * self.scale_ + self.mean_


def standardize(table, scaler=None):
    """Standardize continuous columns of ``table``.

    With ``scaler=None`` a new :class:`Scaler` is fit on ``table``; pass a
    fitted one to apply training statistics to held-out rows. Returns the new
    table (column metadata carry mean/stddev) and the scaler.
    """
    if scaler is None:
        scaler = Scaler(binary_mask=table.binary_mask, feature_names=table.names).fit(table.matrix)
    Z = scaler.transform(table.matrix)
    cols = tuple(
        replace(c, mean=float(scaler.mean_[j]), stddev=float(scaler.scale_[j]))
        if c.kind == "continuous" else c
        for j, c in enumerate(table.columns)
    )
    return replace(table, matrix=Z, columns=cols), scaler


# ---------------------------------------------------------------------------
# splitting

def split_indices(n, train_fraction, seed):
    if not 0 < train_fraction < 1:
        raise DataError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    if n < 2:
        raise DataError("need at least two rows to split")
    n_train = int(math.floor(n * train_fraction + 0.5))
    n_train = min(max(n_train, 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def split(table, train_fraction=0.7, seed=0):
    """Random train/test partition of rows; sizes round(n*f) and the rest."""
    tr, te = split_indices(table.n_rows, train_fraction, seed)
    return table.take(tr), table.take(te)
