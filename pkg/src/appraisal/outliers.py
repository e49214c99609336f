"""Outlier cleaning: spatial k-means, robust per-cluster filters, DBSCAN
subclusters of similar buildings and RANSAC trend isolation.
"""

import csv
import io
import warnings
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, ClusterMixin, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import as_float_matrix, as_float_vector, stream_rng
from .dataset import compute_psmp
from .exceptions import DataError, DegenerateDataWarning
from .features import project


# ---------------------------------------------------------------------------
# k-means

@dataclass(frozen=True, eq=False)
class ClusterAssignment:
    labels: np.ndarray
    centers: np.ndarray = None
    k: int = 0


def _sq_dist(X, C):
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(-1)


def _kmeanspp(X, k, rng):
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    d2 = ((X - centers[0]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        i = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers.append(X[i])
        d2 = np.minimum(d2, ((X - X[i]) ** 2).sum(1))
    return np.array(centers)


class KMeansClusterer(ClusterMixin, BaseEstimator):
    """Lloyd iterations from k-means++ seeding.

    ``inertia_history_`` records the within-cluster sum of squares after each
    assignment step; it never increases.
    """

    def __init__(self, n_clusters=2, seed=0, max_iter=300):
        self.n_clusters = n_clusters
        self.seed = seed
        self.max_iter = max_iter

    def fit(self, X, y=None):
        X = as_float_matrix(X)
        n, k = X.shape[0], int(self.n_clusters)
        if k < 1:
            raise DataError("n_clusters must be at least 1")
        if k > n:
            raise DataError(f"n_clusters={k} exceeds the number of points ({n})")
        rng = np.random.default_rng(self.seed)
        C = _kmeanspp(X, k, rng)
        labels = None
        history = []
        for it in range(self.max_iter):
            new = np.argmin(_sq_dist(X, C), axis=1)
            history.append(float(((X - C[new]) ** 2).sum()))
            if labels is not None and np.array_equal(new, labels):
                break
            labels = new
            for j in range(k):
                members = X[labels == j]
                if len(members):
                    C[j] = members.mean(axis=0)
        self.labels_ = labels
        self.cluster_centers_ = C
        self.inertia_history_ = history
        self.inertia_ = float(((X - C[labels]) ** 2).sum())
        self.n_iter_ = len(history)
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        return np.argmin(_sq_dist(as_float_matrix(X), self.cluster_centers_), axis=1)


def kmeans(points_xy, k, seed=0, max_iter=300):
    km = KMeansClusterer(n_clusters=k, seed=seed, max_iter=max_iter).fit(points_xy)
    return ClusterAssignment(labels=km.labels_, centers=km.cluster_centers_, k=k)


def default_cluster_count(n):
    return max(2, int(round(n / 500)))


# ---------------------------------------------------------------------------
# robust filters

def robust_filter(values, method="iqr", threshold=None):
    """Keep-mask under a box-plot (``iqr``) or z-score (``zscore``) rule.

    iqr keeps [Q1 − t·IQR, Q3 + t·IQR] (t = 1.5 by default, linear-interpolated
    quartiles); zscore keeps |v − mean| / std ≤ t (t = 3, population std).
    Zero spread keeps everything and warns.
    """
    v = as_float_vector(values, "values")
    if method == "iqr":
        t = 1.5 if threshold is None else float(threshold)
        if v.shape[0] < 4:
            raise DataError("the iqr filter needs at least 4 values")
        q1, q3 = np.percentile(v, [25, 75])
        iqr = q3 - q1
        if iqr == 0:
            warnings.warn("zero interquartile range; keeping all values", DegenerateDataWarning, stacklevel=2)
            return np.ones(v.shape[0], dtype=bool)
        return (v >= q1 - t * iqr) & (v <= q3 + t * iqr)
    if method == "zscore":
        t = 3.0 if threshold is None else float(threshold)
        sd = v.std()
        if sd == 0:
            warnings.warn("zero standard deviation; keeping all values", DegenerateDataWarning, stacklevel=2)
            return np.ones(v.shape[0], dtype=bool)
        return np.abs(v - v.mean()) / sd <= t
    raise DataError(f"unknown robust filter method {method!r}")


# ---------------------------------------------------------------------------
# DBSCAN

class DBSCANClusterer(ClusterMixin, BaseEstimator):
    """Density-based clustering with Euclidean neighborhoods; noise is −1.

    A point is core when its closed ``eps``-ball holds at least ``min_pts``
    points (itself included). Clusters are numbered in order of their first
    core point.
    """

    def __init__(self, eps=0.5, min_pts=5):
        self.eps = eps
        self.min_pts = min_pts

    def fit(self, X, y=None):
        X = as_float_matrix(X)
        if not self.eps > 0:
            raise DataError("eps must be positive")
        if self.min_pts < 1:
            raise DataError("min_pts must be at least 1")
        neigh = cKDTree(X).query_ball_point(X, self.eps)
        core = np.array([len(nb) >= self.min_pts for nb in neigh], dtype=bool)
        labels = np.full(X.shape[0], -1, dtype=np.int64)
        cluster = 0
        for i in range(X.shape[0]):
            if not core[i] or labels[i] != -1:
                continue
            labels[i] = cluster
            stack = [i]
            while stack:
                p = stack.pop()
                for q in neigh[p]:
                    if labels[q] == -1:
                        labels[q] = cluster
                        if core[q]:
                            stack.append(q)
            cluster += 1
        self.labels_ = labels
        self.core_sample_mask_ = core
        self.n_clusters_ = cluster
        return self


def dbscan(feature_matrix, eps=0.5, min_pts=5):
    return DBSCANClusterer(eps=eps, min_pts=min_pts).fit(feature_matrix).labels_


# ---------------------------------------------------------------------------
# RANSAC

@dataclass(frozen=True, eq=False)
class RansacFit:
    slope: float
    intercept: float
    inlier_mask: np.ndarray
    iterations_used: int
    threshold: float


def _mad(v):
    return float(np.median(np.abs(v - np.median(v))))


def _ols_line(x, y):
    xm, ym = x.mean(), y.mean()
    sxx = float(((x - xm) ** 2).sum())
    slope = float(((x - xm) * (y - ym)).sum()) / sxx
    return slope, float(ym - slope * xm)


class RansacLine(RegressorMixin, BaseEstimator):
    """Robust line y = slope·x + intercept by random sample consensus.

    Each iteration fits the exact line through two random points with
    distinct x and counts inliers with |residual| ≤ threshold. The candidate
    with most inliers wins (ties: smaller inlier residual sum of squares) and
    the final line is the OLS refit on its inliers.

    Parameters
    ----------
    n_iter : int
        Number of non-degenerate candidate samples.
    threshold : {"target_mad", "residual_mad"} or float
        ``target_mad`` (default) is the median absolute deviation of y,
        computed once; ``residual_mad`` recomputes the MAD of each
        candidate's residuals; a float is used as is.
    min_inliers : int
    seed : int
    """

    def __init__(self, n_iter=100, threshold="target_mad", min_inliers=2, seed=0):
        self.n_iter = n_iter
        self.threshold = threshold
        self.min_inliers = min_inliers
        self.seed = seed

    def fit(self, X, y, rng=None):
        x = np.asarray(X, dtype=float).ravel()
        y = as_float_vector(y)
        if x.shape[0] != y.shape[0]:
            raise DataError("x and y differ in length")
        n = x.shape[0]
        if n < 2:
            raise DataError("RANSAC needs at least 2 points")
        if self.n_iter < 1:
            raise DataError("n_iter must be at least 1")
        rng = np.random.default_rng(self.seed) if rng is None else rng
        if isinstance(self.threshold, str):
            if self.threshold not in ("target_mad", "residual_mad"):
                raise DataError(f"unknown threshold rule {self.threshold!r}")
            fixed = _mad(y) if self.threshold == "target_mad" else None
        else:
            fixed = float(self.threshold)

        best = None  # (count, -rss, mask, thr)
        valid = draws = 0
        max_draws = 20 * self.n_iter
        while valid < self.n_iter and draws < max_draws:
            draws += 1
            i, j = rng.choice(n, size=2, replace=False)
            if x[i] == x[j]:
                continue
            valid += 1
            slope = (y[j] - y[i]) / (x[j] - x[i])
            resid = y - (y[i] + slope * (x - x[i]))
            thr = fixed if fixed is not None else _mad(resid)
            mask = np.abs(resid) <= thr
            cnt = int(mask.sum())
            rss = float((resid[mask] ** 2).sum())
            if best is None or cnt > best[0] or (cnt == best[0] and rss < -best[1]):
                best = (cnt, -rss, mask, thr)
        if best is None:
            raise DataError("every RANSAC sample was degenerate (all sampled x equal)")
        cnt, _, mask, thr = best
        if cnt < max(self.min_inliers, 2):
            raise DataError(f"best RANSAC candidate has {cnt} inliers, fewer than {self.min_inliers}")
        if np.ptp(x[mask]) == 0:
            raise DataError("RANSAC inliers share a single x value; cannot refit a line")
        self.slope_, self.intercept_ = _ols_line(x[mask], y[mask])
        self.inlier_mask_ = mask
        self.n_iter_ = valid
        self.threshold_ = thr
        return self

    def predict(self, X):
        check_is_fitted(self, "slope_")
        return self.slope_ * np.asarray(X, dtype=float).ravel() + self.intercept_


def ransac_line(x_area, y_lnpsmp, n_iter=100, seed=0, min_inliers=2, threshold="target_mad"):
    r = RansacLine(n_iter=n_iter, threshold=threshold, min_inliers=min_inliers, seed=seed)
    r.fit(x_area, y_lnpsmp)
    return RansacFit(slope=r.slope_, intercept=r.intercept_, inlier_mask=r.inlier_mask_,
                     iterations_used=r.n_iter_, threshold=r.threshold_)


# ---------------------------------------------------------------------------
# pipeline

@dataclass(frozen=True)
class ReportEntry:
    record_id: str
    stage: str
    reason: str
    statistic: float


@dataclass
class OutlierReport:
    entries: list = field(default_factory=list)

    def add(self, record_id, stage, reason, statistic):
        self.entries.append(ReportEntry(str(record_id), stage, reason, float(statistic)))

    def __len__(self):
        return len(self.entries)

    def removed_ids(self):
        return {e.record_id for e in self.entries}

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["record_id", "stage", "reason", "statistic"])
        for e in self.entries:
            w.writerow([e.record_id, e.stage, e.reason, repr(e.statistic)])
        return buf.getvalue()


@dataclass(frozen=True)
class CleanConfig:
    """Parameters of :func:`clean_pipeline`; each stage has an on/off switch.

    ``screen_bands`` maps a record source (``offer``/``deal``) to a
    [low, high] PSMP band whose members are removed as doubtful.
    ``building_numeric``/``building_categorical`` name the attributes DBSCAN
    sees: numeric ones are z-scored, categorical ones one-hot encoded.
    """

    kmeans: bool = True
    n_clusters: int = None
    robust: bool = True
    robust_method: str = "iqr"
    robust_threshold: float = None
    cluster_median: bool = False
    screen: bool = True
    screen_bands: dict = field(default_factory=lambda: {"deal": [50000.0, 100000.0]})
    dbscan: bool = True
    eps: float = 0.5
    min_pts: int = 5
    building_numeric: tuple = ("storeys_total", "year_built")
    building_categorical: tuple = ("wall_material",)
    drop_dbscan_noise: bool = False
    ransac: bool = True
    ransac_iter: int = 100
    ransac_threshold: object = "target_mad"
    ransac_min_group: int = 10
    seed: int = 0
    n_jobs: int = 1

    @classmethod
    def disabled(cls, **kw):
        base = dict(kmeans=False, robust=False, screen=False, dbscan=False, ransac=False,
                    cluster_median=False)
        base.update(kw)
        return cls(**base)


def _building_matrix(records, cfg):
    cols = []
    for a in cfg.building_numeric:
        v = np.array([float(r.attributes.get(a, np.nan)) for r in records])
        if np.any(~np.isfinite(v)):
            raise DataError(f"DBSCAN attribute {a!r} missing or non-numeric for some record")
        sd = v.std()
        cols.append((v - v.mean()) / sd if sd > 0 else np.zeros_like(v))
    for a in cfg.building_categorical:
        vals = [str(r.attributes.get(a, "")) for r in records]
        for level in sorted(set(vals)):
            cols.append(np.array([1.0 if v == level else 0.0 for v in vals]))
    if not cols:
        return np.zeros((len(records), 1))
    return np.column_stack(cols)


def _ransac_group(idx, area, lnp, cfg, key):
    r = RansacLine(n_iter=cfg.ransac_iter, threshold=cfg.ransac_threshold, min_inliers=2)
    try:
        r.fit(area[idx], lnp[idx], rng=stream_rng(cfg.seed, *key))
    except DataError:
        return idx[:0], None, None
    resid = lnp[idx] - r.predict(area[idx])
    out = ~r.inlier_mask_
    return idx[out], resid[out], r.threshold_


def clean_pipeline(records, config=None):
    """Run the cleaning stages for one market segment.

    Land parcels: k-means on location, then a robust filter on PSMP inside
    each cluster. Flats: PSMP band screen, k-means territorial clusters,
    DBSCAN subclusters on building characteristics within each territorial
    cluster, then RANSAC of ln(PSMP) on area inside each subcluster.

    Returns ``(kept_records, OutlierReport)``; every removed record has one
    report entry.
    """
    cfg = config or CleanConfig()
    records = list(records)
    report = OutlierReport()
    if not records:
        return [], report
    segments = {r.segment for r in records}
    if len(segments) != 1:
        raise DataError(f"clean_pipeline expects one segment, got {sorted(segments)}")
    segment = segments.pop()
    removed = np.zeros(len(records), dtype=bool)
    psmp = np.array([compute_psmp(r) for r in records])

    if segment == "flat" and cfg.screen:
        for i, r in enumerate(records):
            band = (cfg.screen_bands or {}).get(r.source)
            if band is not None and band[0] <= psmp[i] <= band[1]:
                removed[i] = True
                report.add(r.id, "pdf_screen", f"{r.source} PSMP in doubtful band "
                           f"[{band[0]:g}, {band[1]:g}]", psmp[i])

    alive = np.flatnonzero(~removed)
    labels = np.zeros(len(records), dtype=np.int64)
    if cfg.kmeans and alive.size:
        xy = project(np.array([(records[i].lon, records[i].lat) for i in alive]))
        k = cfg.n_clusters or default_cluster_count(alive.size)
        k = min(k, alive.size)
        labels[alive] = KMeansClusterer(n_clusters=k, seed=cfg.seed).fit(xy).labels_

    if segment == "land_parcel":
        if cfg.cluster_median and alive.size:
            clusters = np.unique(labels[alive])
            if clusters.size >= 4:
                med = np.array([np.median(psmp[alive][labels[alive] == c]) for c in clusters])
                keep_c = robust_filter(med, cfg.robust_method, cfg.robust_threshold)
                for c, m, ok in zip(clusters, med, keep_c):
                    if ok:
                        continue
                    for i in alive[labels[alive] == c]:
                        removed[i] = True
                        report.add(records[i].id, "cluster_median",
                                   f"cluster {c} median PSMP is atypical", m)
                alive = np.flatnonzero(~removed)
        if cfg.robust:
            for c in np.unique(labels[alive]):
                idx = alive[labels[alive] == c]
                if idx.size < 4:
                    continue
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", DegenerateDataWarning)
                    keep = robust_filter(psmp[idx], cfg.robust_method, cfg.robust_threshold)
                for i in idx[~keep]:
                    removed[i] = True
                    report.add(records[i].id, f"robust_{cfg.robust_method}",
                               f"PSMP outside cluster {c} fences", psmp[i])
    else:
        sub = np.zeros(len(records), dtype=np.int64)
        if cfg.dbscan and alive.size:
            B = _building_matrix([records[i] for i in alive], cfg)
            for c in np.unique(labels[alive]):
                loc = np.flatnonzero(labels[alive] == c)
                sub[alive[loc]] = dbscan(B[loc], cfg.eps, cfg.min_pts)
            if cfg.drop_dbscan_noise:
                for i in alive[sub[alive] == -1]:
                    removed[i] = True
                    report.add(records[i].id, "dbscan", "building is atypical (DBSCAN noise)", -1)
                alive = np.flatnonzero(~removed)
        if cfg.ransac and alive.size:
            area = np.array([r.area for r in records])
            lnp = np.log(psmp)
            groups = []
            for c in np.unique(labels[alive]):
                in_c = alive[labels[alive] == c]
                for s in np.unique(sub[in_c]):
                    idx = in_c[sub[in_c] == s]
                    if idx.size >= cfg.ransac_min_group:
                        groups.append((idx, (int(c), int(s) + 1)))
            results = Parallel(n_jobs=cfg.n_jobs)(
                delayed(_ransac_group)(idx, area, lnp, cfg, key) for idx, key in groups)
            for (idx, key), (out_idx, resid, thr) in zip(groups, results):
                for i, e in zip(out_idx, resid if resid is not None else ()):
                    removed[i] = True
                    report.add(records[i].id, "ransac",
                               f"ln PSMP residual beyond {thr:.4g} in subcluster {key[0]}/{key[1] - 1}", e)
    kept = [r for i, r in enumerate(records) if not removed[i]]
    return kept, report
